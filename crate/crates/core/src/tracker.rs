//! Context cropping, box coding and the online tracking loop.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::extractor::Mode;
use crate::frame::Frame;
use crate::model::Model;
use crate::numeric::{Graph, Tensor};
use crate::recurrent::RecurrentState;

/// Crop extents relative to the box extents.
pub const CONTEXT_FACTOR: f64 = 2.0;

/// Affine map between crop-normalized coordinates `[0, 1]²` and frame pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropGeometry {
    /// Frame position of the crop's top-left corner.
    pub x0: f64,
    pub y0: f64,
    /// Crop extents in frame pixels.
    pub width: f64,
    pub height: f64,
    /// Output resolution in pixels (square).
    pub out_res: usize,
}

impl CropGeometry {
    /// Context region around `b`: centered on it, `factor` times its extents.
    pub fn around(b: &BBox, factor: f64, out_res: usize) -> Self {
        let (w, h) = (b.w * factor, b.h * factor);
        Self {
            x0: b.cx - w / 2.0,
            y0: b.cy - h / 2.0,
            width: w,
            height: h,
            out_res,
        }
    }

    /// Identity-scale geometry: crop pixel == frame pixel.
    pub fn identity(out_res: usize) -> Self {
        Self {
            x0: 0.0,
            y0: 0.0,
            width: out_res as f64,
            height: out_res as f64,
            out_res,
        }
    }

    pub fn to_frame(&self, u: f64, v: f64) -> (f64, f64) {
        (self.x0 + u * self.width, self.y0 + v * self.height)
    }

    pub fn to_crop(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.x0) / self.width, (y - self.y0) / self.height)
    }

    /// Frame-pixel interval `[x0, x0 + width)` covered by the crop.
    pub fn frame_span_x(&self) -> (f64, f64) {
        (self.x0, self.x0 + self.width)
    }

    pub fn frame_span_y(&self) -> (f64, f64) {
        (self.y0, self.y0 + self.height)
    }
}

/// Bilinear crop of the context region around `b`, resampled to
/// `out_res × out_res`. Sample points that fall outside the frame take the
/// frame's mean value. Returns `[C × out_res × out_res]`.
pub fn crop_with_context(
    frame: &Frame,
    b: &BBox,
    out_res: usize,
) -> Result<(Tensor, CropGeometry)> {
    crop_with_factor(frame, b, CONTEXT_FACTOR, out_res)
}

pub fn crop_with_factor(
    frame: &Frame,
    b: &BBox,
    factor: f64,
    out_res: usize,
) -> Result<(Tensor, CropGeometry)> {
    b.validate()?;
    if out_res == 0 || !(factor > 0.0) {
        return Err(Error::invalid(
            "crop resolution and context factor must be positive",
        ));
    }
    let geom = CropGeometry::around(b, factor, out_res);
    let mut out = vec![0.0; frame.channels * out_res * out_res];
    crop_into(frame, &geom, &mut out);
    Ok((
        Tensor::new(vec![frame.channels, out_res, out_res], out)?,
        geom,
    ))
}

pub(crate) fn crop_into(frame: &Frame, geom: &CropGeometry, out: &mut [f64]) {
    let r = geom.out_res;
    let (fw, fh) = (frame.width as f64, frame.height as f64);
    let means = frame.channel_means();
    let sx = geom.width / r as f64;
    let sy = geom.height / r as f64;
    // Per-column sample positions are shared by every row.
    let cols: Vec<Option<(usize, usize, f64)>> = (0..r)
        .map(|j| {
            let x = geom.x0 + (j as f64 + 0.5) * sx;
            (0.0..fw).contains(&x).then(|| lerp_index(x, frame.width))
        })
        .collect();
    for i in 0..r {
        let y = geom.y0 + (i as f64 + 0.5) * sy;
        let row = (0.0..fh).contains(&y).then(|| lerp_index(y, frame.height));
        for c in 0..frame.channels {
            let plane = frame.plane(c);
            let dst = &mut out[(c * r + i) * r..(c * r + i + 1) * r];
            let Some((y0, y1, ty)) = row else {
                dst.fill(means[c]);
                continue;
            };
            for (d, col) in dst.iter_mut().zip(&cols) {
                *d = match col {
                    None => means[c],
                    Some((x0, x1, tx)) => {
                        let p = |yy: usize, xx: usize| plane[yy * frame.width + xx] as f64;
                        let top = p(y0, *x0) * (1.0 - tx) + p(y0, *x1) * tx;
                        let bot = p(y1, *x0) * (1.0 - tx) + p(y1, *x1) * tx;
                        top * (1.0 - ty) + bot * ty
                    }
                };
            }
        }
    }
}

/// Neighbouring pixel indices and blend weight for continuous coordinate
/// `x` (pixel `k` has its center at `k + 0.5`), clamped at the borders.
fn lerp_index(x: f64, n: usize) -> (usize, usize, f64) {
    let p = (x - 0.5).clamp(0.0, (n - 1) as f64);
    let i0 = p.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, p - i0 as f64)
}

/// Training target for `b`: its corners in crop-normalized units.
pub fn encode_box(b: &BBox, geom: &CropGeometry) -> [f64; 4] {
    let (u1, v1) = geom.to_crop(b.x1(), b.y1());
    let (u2, v2) = geom.to_crop(b.x2(), b.y2());
    [u1, v1, u2, v2]
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decoded {
    pub bbox: BBox,
    /// Set when the raw corners described an extent below one pixel.
    pub clamped: bool,
}

/// Smallest extent a decoded box may have, in frame pixels.
pub const MIN_EXTENT: f64 = 1.0;

/// Maps raw `(x1, y1, x2, y2)` crop-normalized corners to a frame box.
pub fn decode_box(raw: &[f64], geom: &CropGeometry) -> Result<Decoded> {
    let [u1, v1, u2, v2] = raw else {
        return Err(Error::invalid(format!(
            "decode needs 4 values, got {}",
            raw.len()
        )));
    };
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("regression output".into()));
    }
    let (x1, y1) = geom.to_frame(*u1, *v1);
    let (x2, y2) = geom.to_frame(*u2, *v2);
    let mut clamped = false;
    let mut extent = |a: f64, b: f64| {
        let w = b - a;
        if w < MIN_EXTENT {
            clamped = true;
            MIN_EXTENT
        } else {
            w
        }
    };
    let w = extent(x1, x2);
    let h = extent(y1, y2);
    let bbox = BBox::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, w, h)?;
    if clamped {
        log::warn!("degenerate regression output {raw:?} clamped to {MIN_EXTENT} px");
    }
    Ok(Decoded { bbox, clamped })
}

/// The coin flip behind [`teacher_select`]: true means "use the prediction".
pub fn teacher_uses_prediction<R: Rng + ?Sized>(p_pred: f64, rng: &mut R) -> bool {
    rng.random::<f64>() < p_pred
}

/// Reference box for the next training crop: the prediction with
/// probability `p_pred`, the ground truth otherwise.
pub fn teacher_select<R: Rng + ?Sized>(gt: BBox, pred: BBox, p_pred: f64, rng: &mut R) -> BBox {
    if teacher_uses_prediction(p_pred, rng) {
        pred
    } else {
        gt
    }
}

/// Single-object tracker driven one frame at a time.
pub trait Tracker {
    /// Starts a track on `frame` from `bbox`.
    fn init(&mut self, frame: &Frame, bbox: BBox) -> Result<()>;
    /// Predicts the target box in the next frame.
    fn step(&mut self, frame: &Frame) -> Result<BBox>;
}

#[derive(Clone, Debug)]
pub struct TrackerState {
    pub rnn: RecurrentState,
    pub last: BBox,
    pub geom: CropGeometry,
    /// Frame index of the last processed frame (0 = init frame).
    pub frame_index: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackerOptions {
    /// Zero the recurrent state every this many frames. Off by default.
    #[serde(default)]
    pub reset_interval: Option<usize>,
}

/// Tracker backed by a trained network.
pub struct NetworkTracker<'a> {
    model: &'a Model,
    options: TrackerOptions,
    state: Option<TrackerState>,
    prev: Option<Frame>,
}

impl<'a> NetworkTracker<'a> {
    pub fn new(model: &'a Model, options: TrackerOptions) -> Self {
        Self {
            model,
            options,
            state: None,
            prev: None,
        }
    }

    pub fn state(&self) -> Option<&TrackerState> {
        self.state.as_ref()
    }

    fn out_res(&self) -> usize {
        self.model.net.config.extractor.input_size
    }

    fn predict(
        &self,
        prev: &Frame,
        cur: &Frame,
        state: &TrackerState,
    ) -> Result<(BBox, RecurrentState, CropGeometry)> {
        let res = self.out_res();
        let (pc, geom) = crop_with_context(prev, &state.last, res)?;
        let (cc, _) = crop_with_context(cur, &state.last, res)?;
        let shape = self.model.net.extractor.crop_shape(1);
        let pc = pc.reshape(&shape)?;
        let cc = cc.reshape(&shape)?;
        let mut g = Graph::new();
        let u = self.model.net.unroll(
            &mut g,
            &self.model.params,
            &[pc],
            &[cc],
            &state.rnn,
            Mode::Infer,
        )?;
        let raw = g.value(u.outputs[0]).data().to_vec();
        let d = decode_box(&raw, &geom)?;
        Ok((d.bbox, RecurrentState::from_graph(&g, &u.states), geom))
    }
}

impl Tracker for NetworkTracker<'_> {
    fn init(&mut self, frame: &Frame, bbox: BBox) -> Result<()> {
        bbox.validate()?;
        let expected = self.model.net.config.extractor.input_channels;
        if frame.channels != expected {
            return Err(Error::invalid(format!(
                "model expects {expected}-channel frames, got {}",
                frame.channels
            )));
        }
        self.state = Some(TrackerState {
            rnn: self.model.zero_state(1),
            last: bbox,
            geom: CropGeometry::around(&bbox, CONTEXT_FACTOR, self.out_res()),
            frame_index: 0,
        });
        self.prev = Some(frame.clone());
        Ok(())
    }

    fn step(&mut self, frame: &Frame) -> Result<BBox> {
        let (Some(state), Some(prev)) = (self.state.as_mut(), self.prev.as_ref()) else {
            return Err(Error::invalid("step before init"));
        };
        let index = state.frame_index + 1;
        if let Some(k) = self.options.reset_interval {
            if k > 0 && index % k == 0 {
                state.rnn.reset();
            }
        }
        let snapshot = state.clone();
        let (bbox, rnn, geom) =
            self.predict(prev, frame, &snapshot)
                .map_err(|e| Error::TrackingFault {
                    frame: index,
                    reason: e.to_string(),
                })?;
        let state = self.state.as_mut().expect("initialized");
        state.rnn = rnn;
        state.last = bbox;
        state.geom = geom;
        state.frame_index = index;
        self.prev = Some(frame.clone());
        Ok(bbox)
    }
}

/// Replays a fixed list of boxes (for harness self-tests).
pub struct ReplayTracker {
    boxes: Vec<BBox>,
    next: usize,
}

impl ReplayTracker {
    pub fn new(boxes: Vec<BBox>) -> Self {
        Self { boxes, next: 0 }
    }
}

impl Tracker for ReplayTracker {
    fn init(&mut self, _frame: &Frame, bbox: BBox) -> Result<()> {
        bbox.validate()?;
        self.next = 1;
        Ok(())
    }

    fn step(&mut self, _frame: &Frame) -> Result<BBox> {
        let b = self
            .boxes
            .get(self.next)
            .copied()
            .ok_or(Error::TrackingFault {
                frame: self.next,
                reason: "replay exhausted".into(),
            })?;
        self.next += 1;
        Ok(b)
    }
}

/// Reports the initial box forever.
#[derive(Default)]
pub struct ConstantTracker {
    bbox: Option<BBox>,
}

impl Tracker for ConstantTracker {
    fn init(&mut self, _frame: &Frame, bbox: BBox) -> Result<()> {
        bbox.validate()?;
        self.bbox = Some(bbox);
        Ok(())
    }

    fn step(&mut self, _frame: &Frame) -> Result<BBox> {
        self.bbox.ok_or_else(|| Error::invalid("step before init"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::recurrent::{Scale, Variant};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gradient_frame(w: usize, h: usize) -> Frame {
        let data = (0..w * h)
            .map(|i| (i % w) as f32 / w as f32 * 0.5 + (i / w) as f32 / h as f32 * 0.5)
            .collect();
        Frame::new(w, h, 1, data).unwrap()
    }

    #[test]
    fn uniform_frame_gives_uniform_crop() {
        let f = Frame::filled(32, 32, 1, 0.4);
        let b = BBox::new(16.0, 16.0, 8.0, 8.0).unwrap();
        let (c, _) = crop_with_context(&f, &b, 16).unwrap();
        assert!(c.data().iter().all(|&v| (v - 0.4f32 as f64).abs() < 1e-12));
    }

    #[test]
    fn corner_crop_pads_with_mean() {
        let f = gradient_frame(32, 32);
        let mean = f.channel_means()[0];
        let b = BBox::new(0.0, 0.0, 8.0, 8.0).unwrap();
        let (c, g) = crop_with_context(&f, &b, 16).unwrap();
        assert_eq!((g.x0, g.y0), (-8.0, -8.0));
        // Top-left quadrant samples lie outside the frame.
        for i in 0..8 {
            for j in 0..16 {
                assert_eq!(c.data()[i * 16 + j], mean);
                assert_eq!(c.data()[j * 16 + i], mean);
            }
        }
        assert_ne!(c.data()[15 * 16 + 15], mean);
    }

    #[test]
    fn crop_covers_context_region() {
        let b = BBox::new(10.0, 10.0, 4.0, 4.0).unwrap();
        let g = CropGeometry::around(&b, CONTEXT_FACTOR, 64);
        assert_eq!(g.frame_span_x(), (6.0, 14.0));
        assert_eq!(g.frame_span_y(), (6.0, 14.0));
        let wide = CropGeometry::around(&b, 4.0, 64);
        assert_eq!(wide.frame_span_x(), (2.0, 18.0));
    }

    #[test]
    fn identity_scale_crop_copies_pixels() {
        let f = gradient_frame(32, 32);
        let b = BBox::new(16.0, 16.0, 8.0, 8.0).unwrap();
        let (c, _) = crop_with_factor(&f, &b, 2.0, 16).unwrap();
        // One crop pixel per frame pixel, starting at (8, 8).
        for i in 0..16 {
            for j in 0..16 {
                assert!((c.data()[i * 16 + j] - f.get(0, 8 + i, 8 + j) as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decode_central_region() {
        let d = decode_box(&[0.25, 0.25, 0.75, 0.75], &CropGeometry::identity(64)).unwrap();
        assert_eq!(d.bbox, BBox::new(32.0, 32.0, 32.0, 32.0).unwrap());
        assert!(!d.clamped);
    }

    #[test]
    fn encode_decode_context_box() {
        let b = BBox::new(37.5, 12.25, 9.0, 5.5).unwrap();
        let g = CropGeometry::around(&b, CONTEXT_FACTOR, 64);
        let raw = encode_box(&b, &g);
        assert_eq!(raw, [0.25, 0.25, 0.75, 0.75]);
        let d = decode_box(&raw, &g).unwrap().bbox;
        assert!((d.cx - b.cx).abs() < 1e-9 && (d.w - b.w).abs() < 1e-9);
    }

    #[test]
    fn inverted_corners_are_clamped() {
        let d = decode_box(&[0.6, 0.2, 0.4, 0.8], &CropGeometry::identity(64)).unwrap();
        assert!(d.clamped);
        assert_eq!(d.bbox.w, 1.0);
        assert!(decode_box(&[f64::NAN, 0.0, 1.0, 1.0], &CropGeometry::identity(64)).is_err());
    }

    #[test]
    fn teacher_select_extremes_and_rate() {
        let gt = BBox::new(1.0, 1.0, 1.0, 1.0).unwrap();
        let pred = BBox::new(2.0, 2.0, 1.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            assert_eq!(teacher_select(gt, pred, 0.0, &mut rng), gt);
            assert_eq!(teacher_select(gt, pred, 1.0, &mut rng), pred);
        }
        let n = (0..10_000)
            .filter(|_| teacher_select(gt, pred, 0.5, &mut rng) == pred)
            .count();
        assert!((4700..=5300).contains(&n), "{n}");
    }

    fn zero_head_model() -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = Model::new(
            ModelConfig::for_variant(Variant::Plain, Scale::Desk),
            &mut rng,
        )
        .unwrap();
        let (w, _) = m.net.head_ids();
        m.params.value_mut(w).data_mut().fill(0.0);
        m
    }

    #[test]
    fn zero_head_tracker_keeps_box() {
        let m = zero_head_model();
        let mut t = NetworkTracker::new(&m, TrackerOptions::default());
        let f = gradient_frame(48, 48);
        let b = BBox::new(20.0, 22.0, 10.0, 8.0).unwrap();
        t.init(&f, b).unwrap();
        assert!(t.state().unwrap().rnn.is_zero());
        let p = t.step(&f).unwrap();
        assert!((p.cx - b.cx).abs() < 1e-9 && (p.w - b.w).abs() < 1e-9 && (p.h - b.h).abs() < 1e-9);
        assert_eq!(t.state().unwrap().frame_index, 1);
    }

    #[test]
    fn nan_weights_fault_with_frame_index() {
        let mut m = zero_head_model();
        let id = m.params.id("head.b").unwrap();
        m.params.value_mut(id).data_mut()[0] = f64::NAN;
        let mut t = NetworkTracker::new(&m, TrackerOptions::default());
        let f = gradient_frame(48, 48);
        t.init(&f, BBox::new(20.0, 22.0, 10.0, 8.0).unwrap())
            .unwrap();
        match t.step(&f) {
            Err(Error::TrackingFault { frame, .. }) => assert_eq!(frame, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn init_is_deterministic() {
        let m = zero_head_model();
        let f = gradient_frame(48, 48);
        let b = BBox::new(20.0, 22.0, 10.0, 8.0).unwrap();
        let mut a = NetworkTracker::new(&m, TrackerOptions::default());
        let mut c = NetworkTracker::new(&m, TrackerOptions::default());
        a.init(&f, b).unwrap();
        c.init(&f, b).unwrap();
        assert_eq!(a.state().unwrap().rnn, c.state().unwrap().rnn);
    }
}
