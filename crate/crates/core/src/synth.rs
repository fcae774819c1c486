//! Deterministic synthetic tracking sequences with attribute events.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::frame::Frame;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Attribute {
    Occlusion,
    OutOfView,
    LowResolution,
    IlluminationVariation,
    FastMotion,
}

impl Attribute {
    pub const ALL: [Attribute; 5] = [
        Attribute::Occlusion,
        Attribute::OutOfView,
        Attribute::LowResolution,
        Attribute::IlluminationVariation,
        Attribute::FastMotion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Occlusion => "occlusion",
            Attribute::OutOfView => "out-of-view",
            Attribute::LowResolution => "low-resolution",
            Attribute::IlluminationVariation => "illumination-variation",
            Attribute::FastMotion => "fast-motion",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetShape {
    Rect,
    Ellipse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub shape: TargetShape,
    pub width: f64,
    pub height: f64,
    /// Mean intensity of the target texture.
    pub intensity: f64,
    pub texture_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionSpec {
    /// Center at frame 0.
    pub start: (f64, f64),
    pub velocity: (f64, f64),
    #[serde(default)]
    pub acceleration: (f64, f64),
    /// Per-frame probability of a random heading change.
    #[serde(default)]
    pub direction_change_rate: f64,
    /// Bound on the per-frame center displacement.
    pub max_speed: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcclusionEvent {
    pub start: usize,
    /// Exclusive.
    pub end: usize,
    /// Fraction of the box width hidden, measured from its left edge.
    pub coverage: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutOfViewEvent {
    pub start: usize,
    pub end: usize,
    pub side: Side,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IlluminationRamp {
    pub start: usize,
    pub end: usize,
    /// Gain reached at the middle of the ramp; 1 at both ends.
    pub peak_gain: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceSpec {
    pub name: String,
    pub width: usize,
    pub height: usize,
    pub length: usize,
    pub target: TargetSpec,
    pub motion: MotionSpec,
    #[serde(default)]
    pub occlusions: Vec<OcclusionEvent>,
    #[serde(default)]
    pub out_of_view: Vec<OutOfViewEvent>,
    #[serde(default)]
    pub illumination: Vec<IlluminationRamp>,
    #[serde(default = "one")]
    pub downscale: usize,
    #[serde(default)]
    pub distractors: usize,
}

fn one() -> usize {
    1
}

/// Speeds at or above this many pixels per frame count as fast motion.
pub const FAST_MOTION_SPEED: f64 = 4.0;

impl SequenceSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("sequence {}: {m}", self.name)));
        if self.width < 8 || self.height < 8 || self.length < 2 {
            return bad("frames must be at least 8×8 and sequences at least 2 frames".into());
        }
        let t = &self.target;
        if !(t.width >= 2.0 && t.height >= 2.0)
            || t.width >= self.width as f64
            || t.height >= self.height as f64
        {
            return bad(format!(
                "target {}×{} does not fit the frame",
                t.width, t.height
            ));
        }
        if !(0.0..=1.0).contains(&t.intensity) {
            return bad("target intensity outside [0, 1]".into());
        }
        let m = &self.motion;
        let finite = [
            m.start.0,
            m.start.1,
            m.velocity.0,
            m.velocity.1,
            m.acceleration.0,
            m.acceleration.1,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite || !(m.max_speed > 0.0) || !(0.0..=1.0).contains(&m.direction_change_rate) {
            return bad("invalid motion model".into());
        }
        let within = |s: usize, e: usize| s < e && e <= self.length;
        for o in &self.occlusions {
            if !within(o.start, o.end) || !(0.0..=1.0).contains(&o.coverage) {
                return bad(format!("invalid occlusion event {o:?}"));
            }
        }
        for o in &self.out_of_view {
            if !within(o.start, o.end) || o.start == 0 {
                return bad(format!("invalid out-of-view event {o:?}"));
            }
        }
        for r in &self.illumination {
            if !within(r.start, r.end) || !(r.peak_gain > 0.0) {
                return bad(format!("invalid illumination ramp {r:?}"));
            }
        }
        if self.downscale == 0
            || self.width % self.downscale != 0
            || self.height % self.downscale != 0
        {
            return bad(format!(
                "downscale factor {} must divide the frame size",
                self.downscale
            ));
        }
        Ok(())
    }

    /// Attribute tags implied by the events and the motion model.
    pub fn tags(&self) -> BTreeSet<Attribute> {
        let mut t = BTreeSet::new();
        if !self.occlusions.is_empty() {
            t.insert(Attribute::Occlusion);
        }
        if !self.out_of_view.is_empty() {
            t.insert(Attribute::OutOfView);
        }
        if self.downscale > 1 {
            t.insert(Attribute::LowResolution);
        }
        if !self.illumination.is_empty() {
            t.insert(Attribute::IlluminationVariation);
        }
        if self.motion.max_speed >= FAST_MOTION_SPEED {
            t.insert(Attribute::FastMotion);
        }
        t
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub name: String,
    pub frames: Vec<Frame>,
    /// Ground truth, clipped to the frame.
    pub boxes: Vec<BBox>,
    /// The target's actual extent, which may leave the frame.
    pub true_boxes: Vec<BBox>,
    pub visible: Vec<bool>,
    pub tags: BTreeSet<Attribute>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn has(&self, a: Attribute) -> bool {
        self.tags.contains(&a)
    }
}

/// Smoothly interpolated lattice noise.
struct ValueNoise {
    cell: f64,
    cols: usize,
    values: Vec<f64>,
}

impl ValueNoise {
    fn new<R: Rng>(rng: &mut R, width: f64, height: f64, cell: f64) -> Self {
        let cols = (width / cell).ceil() as usize + 2;
        let rows = (height / cell).ceil() as usize + 2;
        let values = (0..cols * rows).map(|_| rng.random::<f64>()).collect();
        Self { cell, cols, values }
    }

    fn sample(&self, x: f64, y: f64) -> f64 {
        let fx = (x / self.cell).max(0.0);
        let fy = (y / self.cell).max(0.0);
        let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
        let rows = self.values.len() / self.cols;
        let ix = ix.min(self.cols - 2);
        let iy = iy.min(rows - 2);
        let s = |t: f64| t * t * (3.0 - 2.0 * t);
        let tx = s((fx - ix as f64).clamp(0.0, 1.0));
        let ty = s((fy - iy as f64).clamp(0.0, 1.0));
        let v = |r: usize, c: usize| self.values[r * self.cols + c];
        let top = v(iy, ix) * (1.0 - tx) + v(iy, ix + 1) * tx;
        let bot = v(iy + 1, ix) * (1.0 - tx) + v(iy + 1, ix + 1) * tx;
        top * (1.0 - ty) + bot * ty
    }
}

/// Centers of the target over time, before events are applied.
fn base_trajectory<R: Rng>(spec: &SequenceSpec, rng: &mut R) -> Vec<(f64, f64)> {
    let m = &spec.motion;
    let (hw, hh) = (spec.target.width / 2.0, spec.target.height / 2.0);
    let (fw, fh) = (spec.width as f64, spec.height as f64);
    let mut p = m.start;
    let mut v = m.velocity;
    let mut out = Vec::with_capacity(spec.length);
    out.push(p);
    for _ in 1..spec.length {
        if m.direction_change_rate > 0.0 && rng.random::<f64>() < m.direction_change_rate {
            let turn = rng.random_range(std::f64::consts::FRAC_PI_4..std::f64::consts::FRAC_PI_2)
                * if rng.random::<bool>() { 1.0 } else { -1.0 };
            let (s, c) = turn.sin_cos();
            v = (v.0 * c - v.1 * s, v.0 * s + v.1 * c);
        }
        v = (v.0 + m.acceleration.0, v.1 + m.acceleration.1);
        let speed = v.0.hypot(v.1);
        if speed > m.max_speed {
            v = (v.0 * m.max_speed / speed, v.1 * m.max_speed / speed);
        }
        p = (p.0 + v.0, p.1 + v.1);
        // Reflect off the borders so the box stays inside the frame.
        if p.0 - hw < 0.0 {
            p.0 = 2.0 * hw - p.0;
            v.0 = v.0.abs();
        } else if p.0 + hw > fw {
            p.0 = 2.0 * (fw - hw) - p.0;
            v.0 = -v.0.abs();
        }
        if p.1 - hh < 0.0 {
            p.1 = 2.0 * hh - p.1;
            v.1 = v.1.abs();
        } else if p.1 + hh > fh {
            p.1 = 2.0 * (fh - hh) - p.1;
            v.1 = -v.1.abs();
        }
        p = (p.0.clamp(hw, fw - hw), p.1.clamp(hh, fh - hh));
        out.push(p);
    }
    out
}

/// Replaces the trajectory around each out-of-view event: a linear ramp to
/// a parking point just beyond the frame edge, a hold, and a ramp back.
fn splice_out_of_view(spec: &SequenceSpec, path: &mut [(f64, f64)]) -> Result<()> {
    let limit = spec.motion.max_speed;
    let w = spec.target.width;
    for ev in &spec.out_of_view {
        let park_x = match ev.side {
            Side::Right => spec.width as f64 + w / 2.0 - 1.0,
            Side::Left => -w / 2.0 + 1.0,
        };
        // Ramp in, ending on frame `start`.
        let mut len_in = 1;
        loop {
            if len_in > ev.start {
                return Err(Error::Config(format!(
                    "sequence {}: not enough frames before out-of-view event at {}",
                    spec.name, ev.start
                )));
            }
            let from = path[ev.start - len_in];
            let d = (park_x - from.0).hypot(0.0);
            if d / len_in as f64 <= limit {
                break;
            }
            len_in += 1;
        }
        let from = path[ev.start - len_in];
        let park = (park_x, from.1);
        for k in 1..=len_in {
            let t = k as f64 / len_in as f64;
            path[ev.start - len_in + k] = (from.0 + t * (park.0 - from.0), from.1);
        }
        for p in path.iter_mut().take(ev.end).skip(ev.start) {
            *p = park;
        }
        // Ramp out from the last parked frame back onto the base path.
        let last = ev.end - 1;
        let mut len_out = 1;
        while last + len_out < path.len() - 1 {
            let to = path[last + len_out];
            if (to.0 - park.0).hypot(to.1 - park.1) / len_out as f64 <= limit {
                break;
            }
            len_out += 1;
        }
        let end = (last + len_out).min(path.len() - 1);
        if end > last {
            let to = path[end];
            let to = if (to.0 - park.0).hypot(to.1 - park.1) / (end - last) as f64 <= limit {
                to
            } else {
                // Sequence ends mid-ramp: head back at the speed limit.
                let d = (to.0 - park.0).hypot(to.1 - park.1);
                let s = limit * (end - last) as f64 / d;
                (park.0 + s * (to.0 - park.0), park.1 + s * (to.1 - park.1))
            };
            for k in 1..=end - last {
                let t = k as f64 / (end - last) as f64;
                path[last + k] = (park.0 + t * (to.0 - park.0), park.1 + t * (to.1 - park.1));
            }
        }
    }
    Ok(())
}

fn coverage_at(spec: &SequenceSpec, t: usize) -> f64 {
    spec.occlusions
        .iter()
        .filter(|o| (o.start..o.end).contains(&t))
        .fold(0.0, |c, o| c.max(o.coverage))
}

fn gain_at(spec: &SequenceSpec, t: usize) -> f64 {
    let mut g = 1.0;
    for r in &spec.illumination {
        if (r.start..r.end).contains(&t) {
            let span = (r.end - r.start) as f64;
            let x = (t - r.start) as f64 / span;
            let tri = 1.0 - (2.0 * x - 1.0).abs();
            g *= 1.0 + (r.peak_gain - 1.0) * tri;
        }
    }
    g
}

struct Distractor {
    start: (f64, f64),
    velocity: (f64, f64),
    radius: f64,
    intensity: f64,
}

/// 2×2 supersampled coverage of a pixel by a predicate.
fn coverage<F: Fn(f64, f64) -> bool>(x: usize, y: usize, inside: F) -> f64 {
    const OFF: [f64; 2] = [0.25, 0.75];
    let mut n = 0;
    for oy in OFF {
        for ox in OFF {
            if inside(x as f64 + ox, y as f64 + oy) {
                n += 1;
            }
        }
    }
    n as f64 / 4.0
}

/// Renders `spec` deterministically from `seed`.
pub fn generate(spec: &SequenceSpec, seed: u64) -> Result<Sequence> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (fw, fh) = (spec.width as f64, spec.height as f64);
    let bg_coarse = ValueNoise::new(&mut rng, fw, fh, 16.0);
    let bg_fine = ValueNoise::new(&mut rng, fw, fh, 4.0);
    let mut tex_rng = ChaCha8Rng::seed_from_u64(spec.target.texture_seed);
    let tex = ValueNoise::new(
        &mut tex_rng,
        spec.target.width + 2.0,
        spec.target.height + 2.0,
        3.0,
    );
    let occ_tex = ValueNoise::new(&mut rng, fw + 8.0, fh + 8.0, 2.0);
    let distractors: Vec<Distractor> = (0..spec.distractors)
        .map(|_| Distractor {
            start: (rng.random_range(0.0..fw), rng.random_range(0.0..fh)),
            velocity: (rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)),
            radius: rng.random_range(3.0..6.0),
            intensity: rng.random_range(0.0..1.0),
        })
        .collect();
    let mut motion_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d6f_7469_6f6e);
    let mut path = base_trajectory(spec, &mut motion_rng);
    splice_out_of_view(spec, &mut path)?;

    let (tw, th) = (spec.target.width, spec.target.height);
    let background: Vec<f64> = (0..spec.width * spec.height)
        .map(|i| {
            let (x, y) = ((i % spec.width) as f64 + 0.5, (i / spec.width) as f64 + 0.5);
            0.3 + 0.25 * bg_coarse.sample(x, y) + 0.15 * bg_fine.sample(x, y)
        })
        .collect();

    let mut frames = Vec::with_capacity(spec.length);
    let mut boxes = Vec::with_capacity(spec.length);
    let mut true_boxes = Vec::with_capacity(spec.length);
    let mut visible = Vec::with_capacity(spec.length);
    for (t, &(cx, cy)) in path.iter().enumerate() {
        let mut px = background.clone();
        for d in &distractors {
            let mut c = (
                d.start.0 + d.velocity.0 * t as f64,
                d.start.1 + d.velocity.1 * t as f64,
            );
            c.0 = reflect(c.0, fw);
            c.1 = reflect(c.1, fh);
            paint(
                &mut px,
                spec.width,
                spec.height,
                (
                    c.0 - d.radius,
                    c.1 - d.radius,
                    c.0 + d.radius,
                    c.1 + d.radius,
                ),
                |x, y| {
                    ((x - c.0).powi(2) + (y - c.1).powi(2) <= d.radius * d.radius)
                        .then_some(d.intensity)
                },
            );
        }
        let (x1, y1) = (cx - tw / 2.0, cy - th / 2.0);
        let shape = spec.target.shape;
        let base = spec.target.intensity;
        paint(
            &mut px,
            spec.width,
            spec.height,
            (x1, y1, x1 + tw, y1 + th),
            |x, y| {
                let (dx, dy) = (x - cx, y - cy);
                let inside = match shape {
                    TargetShape::Rect => dx.abs() <= tw / 2.0 && dy.abs() <= th / 2.0,
                    TargetShape::Ellipse => {
                        (dx / (tw / 2.0)).powi(2) + (dy / (th / 2.0)).powi(2) <= 1.0
                    }
                };
                inside.then(|| {
                    (base + 0.3 * (tex.sample(x - x1 + 1.0, y - y1 + 1.0) - 0.5)).clamp(0.0, 1.0)
                })
            },
        );
        let cov = coverage_at(spec, t);
        if cov > 0.0 {
            let right = if cov >= 1.0 {
                x1 + tw + 2.0
            } else {
                x1 + cov * tw
            };
            let rect = (x1 - 2.0, y1 - 2.0, right, y1 + th + 2.0);
            paint(&mut px, spec.width, spec.height, rect, |x, y| {
                (x >= rect.0 && x < rect.2 && y >= rect.1 && y < rect.3)
                    .then(|| 0.15 + 0.7 * occ_tex.sample(x + 4.0, y + 4.0))
            });
        }
        let gain = gain_at(spec, t);
        let mut data: Vec<f32> = px
            .iter()
            .map(|&v| (v * gain).clamp(0.0, 1.0) as f32)
            .collect();
        if spec.downscale > 1 {
            downscale_upscale(&mut data, spec.width, spec.height, spec.downscale);
        }
        let mut frame = Frame::new(spec.width, spec.height, 1, data)?;
        frame.quantize();
        frames.push(frame);

        let tb = BBox::new(cx, cy, tw, th)?;
        let in_view = tb.center_inside(fw, fh);
        visible.push(in_view && cov < 1.0);
        boxes.push(tb.clip_to(fw, fh).unwrap_or(tb));
        true_boxes.push(tb);
    }
    Ok(Sequence {
        name: spec.name.clone(),
        frames,
        boxes,
        true_boxes,
        visible,
        tags: spec.tags(),
    })
}

fn reflect(v: f64, n: f64) -> f64 {
    let period = 2.0 * n;
    let m = v.rem_euclid(period);
    if m > n {
        period - m
    } else {
        m
    }
}

/// Alpha-blends a shape over the pixels of `rect` (x1, y1, x2, y2).
fn paint<F>(px: &mut [f64], w: usize, h: usize, rect: (f64, f64, f64, f64), shade: F)
where
    F: Fn(f64, f64) -> Option<f64>,
{
    let x0 = rect.0.floor().max(0.0) as usize;
    let y0 = rect.1.floor().max(0.0) as usize;
    let x1 = (rect.2.ceil().max(0.0) as usize).min(w);
    let y1 = (rect.3.ceil().max(0.0) as usize).min(h);
    for y in y0..y1 {
        for x in x0..x1 {
            let a = coverage(x, y, |sx, sy| shade(sx, sy).is_some());
            if a > 0.0 {
                let v = shade(x as f64 + 0.5, y as f64 + 0.5)
                    .or_else(|| shade(x as f64 + 0.25, y as f64 + 0.25))
                    .or_else(|| shade(x as f64 + 0.75, y as f64 + 0.25))
                    .or_else(|| shade(x as f64 + 0.25, y as f64 + 0.75))
                    .or_else(|| shade(x as f64 + 0.75, y as f64 + 0.75))
                    .unwrap_or(0.0);
                let p = &mut px[y * w + x];
                *p = *p * (1.0 - a) + v * a;
            }
        }
    }
}

/// Block-average by `k`, then nearest-neighbour back to full size.
fn downscale_upscale(data: &mut [f32], w: usize, h: usize, k: usize) {
    for by in 0..h / k {
        for bx in 0..w / k {
            let mut s = 0.0f64;
            for y in by * k..(by + 1) * k {
                for x in bx * k..(bx + 1) * k {
                    s += data[y * w + x] as f64;
                }
            }
            let m = (s / (k * k) as f64) as f32;
            for y in by * k..(by + 1) * k {
                for x in bx * k..(bx + 1) * k {
                    data[y * w + x] = m;
                }
            }
        }
    }
}

/// Size and count parameters of a generated suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteParams {
    pub count: usize,
    pub width: usize,
    pub height: usize,
    pub length: usize,
}

impl SuiteParams {
    pub fn benchmark() -> Self {
        Self {
            count: 40,
            width: 96,
            height: 96,
            length: 60,
        }
    }

    pub fn training() -> Self {
        Self {
            count: 48,
            width: 96,
            height: 96,
            length: 40,
        }
    }
}

/// Per-sequence layout of a suite: slot `i % 4` selects clean, occlusion,
/// low-resolution or out-of-view.
pub fn suite_specs(params: &SuiteParams, seed: u64) -> Result<Vec<(SequenceSpec, u64)>> {
    if params.count == 0 || params.length < 24 {
        return Err(Error::Config(
            "suites need at least one sequence of 24 or more frames".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(params.count);
    for i in 0..params.count {
        let spec = random_spec(params, i, &mut rng);
        spec.validate()?;
        out.push((spec, rng.random::<u64>()));
    }
    Ok(out)
}

fn random_spec<R: Rng>(p: &SuiteParams, i: usize, rng: &mut R) -> SequenceSpec {
    let (fw, fh) = (p.width as f64, p.height as f64);
    let tw = rng.random_range(0.14..0.26) * fw;
    let th = rng.random_range(0.14..0.26) * fh;
    let fast = rng.random::<f64>() < 0.15;
    let speed = if fast {
        rng.random_range(FAST_MOTION_SPEED..5.0)
    } else {
        rng.random_range(0.5..2.5)
    };
    let heading = rng.random_range(0.0..std::f64::consts::TAU);
    let start = (
        rng.random_range(tw / 2.0 + 2.0..fw - tw / 2.0 - 2.0),
        rng.random_range(th / 2.0 + 2.0..fh - th / 2.0 - 2.0),
    );
    let bright = rng.random::<bool>();
    let mut spec = SequenceSpec {
        name: format!("seq_{i:03}"),
        width: p.width,
        height: p.height,
        length: p.length,
        target: TargetSpec {
            shape: if rng.random::<bool>() {
                TargetShape::Rect
            } else {
                TargetShape::Ellipse
            },
            width: tw.round(),
            height: th.round(),
            intensity: if bright {
                rng.random_range(0.75..0.95)
            } else {
                rng.random_range(0.02..0.18)
            },
            texture_seed: rng.random(),
        },
        motion: MotionSpec {
            start,
            velocity: (speed * heading.cos(), speed * heading.sin()),
            acceleration: (0.0, 0.0),
            direction_change_rate: rng.random_range(0.0..0.06),
            max_speed: if fast { 5.0 } else { speed.max(1.0) * 1.5 },
        },
        occlusions: Vec::new(),
        out_of_view: Vec::new(),
        illumination: Vec::new(),
        downscale: 1,
        distractors: usize::from(rng.random::<f64>() < 0.25),
    };
    let n = p.length;
    match i % 4 {
        1 => {
            let s = rng.random_range(n / 4..n / 2);
            let full = rng.random_range(4..8);
            spec.occlusions = vec![
                OcclusionEvent {
                    start: s,
                    end: s + 3,
                    coverage: 0.5,
                },
                OcclusionEvent {
                    start: s + 3,
                    end: s + 3 + full,
                    coverage: 1.0,
                },
                OcclusionEvent {
                    start: s + 3 + full,
                    end: s + 6 + full,
                    coverage: 0.5,
                },
            ];
        }
        2 => spec.downscale = if rng.random::<bool>() { 3 } else { 4 },
        3 => {
            let s = rng.random_range(n / 3..n / 2);
            let len = rng.random_range(3..7);
            let side = if rng.random::<bool>() {
                Side::Left
            } else {
                Side::Right
            };
            spec.out_of_view = vec![OutOfViewEvent {
                start: s,
                end: s + len,
                side,
            }];
            // Fast enough to reach the parking point from anywhere by frame `s`.
            spec.motion.max_speed = spec.motion.max_speed.max(4.0).max(fw / s as f64);
        }
        _ => {}
    }
    if rng.random::<f64>() < 0.2 {
        let s = rng.random_range(0..n / 2);
        spec.illumination = vec![IlluminationRamp {
            start: s,
            end: (s + n / 3).min(n),
            peak_gain: rng.random_range(0.5..1.5),
        }];
    }
    spec
}

pub fn generate_suite(params: &SuiteParams, seed: u64) -> Result<Vec<Sequence>> {
    use rayon::prelude::*;
    let specs = suite_specs(params, seed)?;
    specs.par_iter().map(|(s, k)| generate(s, *k)).collect()
}

/// The default 40-sequence benchmark suite.
pub fn make_benchmark_suite(seed: u64) -> Result<Vec<Sequence>> {
    generate_suite(&SuiteParams::benchmark(), seed)
}

pub fn make_training_set(seed: u64, count: usize) -> Result<Vec<Sequence>> {
    generate_suite(
        &SuiteParams {
            count,
            ..SuiteParams::training()
        },
        seed,
    )
}

/// Contents of a synthesis file: a generated suite, hand-written sequences,
/// or both. An empty file means the default benchmark suite.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suite: Option<SuiteParams>,
    #[serde(default, rename = "sequence", skip_serializing_if = "Vec::is_empty")]
    pub sequences: Vec<SequenceSpec>,
}

impl SynthFile {
    pub fn from_toml(text: &str) -> Result<Self> {
        let f: SynthFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for s in &f.sequences {
            s.validate()?;
        }
        let mut names: Vec<&str> = f.sequences.iter().map(|s| s.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("sequence names must be unique".into()));
        }
        Ok(f)
    }

    /// Suite sequences first, then the listed ones. Listed sequence `i`
    /// renders with a seed derived from `seed` and `i`.
    pub fn generate(&self, seed: u64) -> Result<Vec<Sequence>> {
        use rayon::prelude::*;
        let suite = match (&self.suite, self.sequences.is_empty()) {
            (Some(p), _) => Some(p.clone()),
            (None, true) => Some(SuiteParams::benchmark()),
            (None, false) => None,
        };
        let mut out = match suite {
            Some(p) => generate_suite(&p, seed)?,
            None => Vec::new(),
        };
        let listed = self
            .sequences
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                generate(
                    s,
                    ChaCha8Rng::seed_from_u64(
                        seed ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15),
                    )
                    .random(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        out.extend(listed);
        let mut names: Vec<&str> = out.iter().map(|s| s.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config(
                "listed sequence names collide with suite names".into(),
            ));
        }
        Ok(out)
    }
}

pub const GROUNDTRUTH_FILE: &str = "groundtruth_rect.txt";
pub const META_FILE: &str = "meta.json";
pub const IMAGE_DIR: &str = "img";

#[derive(Serialize, Deserialize)]
struct Meta {
    name: String,
    tags: BTreeSet<Attribute>,
    visible: Vec<bool>,
    boxes: Vec<BBox>,
    true_boxes: Vec<BBox>,
}

/// Writes `img/0001.png…`, `groundtruth_rect.txt` and `meta.json` under `dir`.
pub fn export_sequence(seq: &Sequence, dir: &Path) -> Result<()> {
    let img = dir.join(IMAGE_DIR);
    fs::create_dir_all(&img).map_err(|e| Error::io(&img, e))?;
    for (i, f) in seq.frames.iter().enumerate() {
        f.write_png(&img.join(format!("{:04}.png", i + 1)))?;
    }
    let mut gt = String::new();
    for b in &seq.boxes {
        gt.push_str(&b.to_rect_line());
        gt.push('\n');
    }
    let gt_path = dir.join(GROUNDTRUTH_FILE);
    fs::write(&gt_path, gt).map_err(|e| Error::io(&gt_path, e))?;
    let meta = Meta {
        name: seq.name.clone(),
        tags: seq.tags.clone(),
        visible: seq.visible.clone(),
        boxes: seq.boxes.clone(),
        true_boxes: seq.true_boxes.clone(),
    };
    let meta_path = dir.join(META_FILE);
    let json = serde_json::to_string_pretty(&meta).expect("meta serializes");
    fs::write(&meta_path, json).map_err(|e| Error::io(&meta_path, e))
}

/// Reads a sequence directory. Without a sidecar, boxes come from the
/// ground-truth file, every frame counts as visible and no tags are set.
pub fn import_sequence(dir: &Path) -> Result<Sequence> {
    let img = dir.join(IMAGE_DIR);
    let mut paths: Vec<_> = fs::read_dir(&img)
        .map_err(|e| Error::io(&img, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    let frames = paths
        .iter()
        .map(|p| Frame::read_png(p))
        .collect::<Result<Vec<_>>>()?;
    let gt_path = dir.join(GROUNDTRUTH_FILE);
    let text = fs::read_to_string(&gt_path).map_err(|e| Error::io(&gt_path, e))?;
    let rects = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(BBox::parse_rect_line)
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Error::format(&gt_path, e.to_string()))?;
    if rects.len() != frames.len() {
        return Err(Error::format(
            dir,
            format!(
                "{} frames but {} ground-truth boxes",
                frames.len(),
                rects.len()
            ),
        ));
    }
    if frames.is_empty() {
        return Err(Error::format(dir, "sequence has no frames"));
    }
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let meta_path = dir.join(META_FILE);
    if !meta_path.exists() {
        return Ok(Sequence {
            name,
            visible: vec![true; frames.len()],
            true_boxes: rects.clone(),
            boxes: rects,
            frames,
            tags: BTreeSet::new(),
        });
    }
    let raw = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: Meta =
        serde_json::from_str(&raw).map_err(|e| Error::format(&meta_path, e.to_string()))?;
    let n = frames.len();
    if meta.boxes.len() != n || meta.true_boxes.len() != n || meta.visible.len() != n {
        return Err(Error::format(
            &meta_path,
            format!("sidecar does not describe {n} frames"),
        ));
    }
    for (b, r) in meta.boxes.iter().zip(&rects) {
        if b.to_rect_line() != r.to_rect_line() {
            return Err(Error::format(
                &meta_path,
                "sidecar boxes disagree with the ground-truth file",
            ));
        }
    }
    Ok(Sequence {
        name: meta.name,
        frames,
        boxes: meta.boxes,
        true_boxes: meta.true_boxes,
        visible: meta.visible,
        tags: meta.tags,
    })
}

/// Sequence directories under `root`, sorted by name.
pub fn import_suite(root: &Path) -> Result<Vec<Sequence>> {
    let mut dirs: Vec<_> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(GROUNDTRUTH_FILE).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::format(root, "no sequence directories found"));
    }
    dirs.iter().map(|d| import_sequence(d)).collect()
}

pub fn export_suite(suite: &[Sequence], root: &Path) -> Result<()> {
    for s in suite {
        export_sequence(s, &root.join(&s.name))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_file_forms() {
        let f = SynthFile::from_toml("").unwrap();
        assert_eq!(f, SynthFile::default());
        let f = SynthFile::from_toml("[suite]\ncount = 4\nwidth = 48\nheight = 48\nlength = 24\n")
            .unwrap();
        let a = f.generate(7).unwrap();
        assert_eq!(a.len(), 4);
        assert_eq!(a, f.generate(7).unwrap());
        assert!(SynthFile::from_toml("[suite]\ncount = 3\n").is_err());
        assert!(SynthFile::from_toml("colour = 1\n").is_err());
        let spec = suite_specs(&SuiteParams::benchmark(), 1).unwrap()[0]
            .0
            .clone();
        let text = toml::to_string(&SynthFile {
            suite: None,
            sequences: vec![spec],
        })
        .unwrap();
        let f = SynthFile::from_toml(&text).unwrap();
        assert_eq!(f.generate(1).unwrap().len(), 1);
    }

    #[test]
    fn out_of_view_slots_generate_for_many_seeds() {
        for params in [SuiteParams::benchmark(), SuiteParams::training()] {
            for seed in 0..40 {
                for (i, (spec, k)) in suite_specs(&params, seed).unwrap().iter().enumerate() {
                    if i % 4 == 3 {
                        let seq = generate(spec, *k).unwrap();
                        assert!(seq.visible.iter().any(|v| !v), "{} seed {seed}", spec.name);
                    }
                }
            }
        }
    }

    fn still_spec() -> SequenceSpec {
        SequenceSpec {
            name: "t".into(),
            width: 64,
            height: 48,
            length: 24,
            target: TargetSpec {
                shape: TargetShape::Rect,
                width: 10.0,
                height: 8.0,
                intensity: 0.9,
                texture_seed: 1,
            },
            motion: MotionSpec {
                start: (20.0, 20.0),
                velocity: (0.0, 0.0),
                acceleration: (0.0, 0.0),
                direction_change_rate: 0.0,
                max_speed: 2.0,
            },
            occlusions: vec![],
            out_of_view: vec![],
            illumination: vec![],
            downscale: 1,
            distractors: 0,
        }
    }

    #[test]
    fn zero_velocity_keeps_box() {
        let s = generate(&still_spec(), 3).unwrap();
        assert!(s.boxes.iter().all(|b| *b == s.boxes[0]));
        assert!(s.visible.iter().all(|&v| v));
    }

    #[test]
    fn linear_motion() {
        let mut spec = still_spec();
        spec.motion.velocity = (2.0, 1.0);
        spec.motion.max_speed = 3.0;
        spec.length = 10;
        let s = generate(&spec, 3).unwrap();
        for (t, b) in s.true_boxes.iter().enumerate() {
            assert!((b.cx - (20.0 + 2.0 * t as f64)).abs() < 1e-9);
            assert!((b.cy - (20.0 + t as f64)).abs() < 1e-9);
        }
    }

    #[test]
    fn full_occlusion_hides_exactly_interval() {
        let mut spec = still_spec();
        spec.occlusions = vec![OcclusionEvent {
            start: 10,
            end: 16,
            coverage: 1.0,
        }];
        let s = generate(&spec, 3).unwrap();
        for (t, &v) in s.visible.iter().enumerate() {
            assert_eq!(v, !(10..16).contains(&t), "frame {t}");
        }
        assert!(s.has(Attribute::Occlusion));
        // The occluder actually changes the pixels of the target.
        assert_ne!(s.frames[9], s.frames[12]);
    }

    #[test]
    fn out_of_view_parks_center_outside() {
        let mut spec = still_spec();
        spec.motion.max_speed = 4.0;
        spec.out_of_view = vec![OutOfViewEvent {
            start: 12,
            end: 16,
            side: Side::Right,
        }];
        let s = generate(&spec, 3).unwrap();
        for t in 12..16 {
            assert!(!s.true_boxes[t].center_inside(64.0, 48.0));
            assert!(!s.visible[t]);
            assert!(s.boxes[t].x2() <= 64.0 + 1e-9);
        }
        assert!(s.visible[0] && s.visible[23]);
        for w in s.true_boxes.windows(2) {
            assert!((w[1].cx - w[0].cx).hypot(w[1].cy - w[0].cy) <= 4.0 + 1e-9);
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = still_spec();
        spec.occlusions = vec![OcclusionEvent {
            start: 5,
            end: 50,
            coverage: 1.0,
        }];
        assert!(generate(&spec, 0).is_err());
        let mut spec = still_spec();
        spec.downscale = 5;
        assert!(generate(&spec, 0).is_err());
        let mut spec = still_spec();
        spec.occlusions = vec![OcclusionEvent {
            start: 1,
            end: 2,
            coverage: 1.5,
        }];
        assert!(generate(&spec, 0).is_err());
    }

    #[test]
    fn low_resolution_is_blocky() {
        let mut spec = still_spec();
        spec.downscale = 4;
        let s = generate(&spec, 3).unwrap();
        let f = &s.frames[0];
        for y in 0..48 {
            for x in 0..64 {
                assert_eq!(f.get(0, y, x), f.get(0, y - y % 4, x - x % 4));
            }
        }
    }

    #[test]
    fn suite_layout() {
        let specs = suite_specs(&SuiteParams::benchmark(), 7).unwrap();
        assert_eq!(specs.len(), 40);
        let occl = specs
            .iter()
            .filter(|(s, _)| s.tags().contains(&Attribute::Occlusion))
            .count();
        assert!(occl >= 8);
        assert_eq!(specs, suite_specs(&SuiteParams::benchmark(), 7).unwrap());
    }

    #[test]
    fn export_import_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = still_spec();
        spec.motion.velocity = (1.3, -0.7);
        spec.length = 5;
        let s = generate(&spec, 11).unwrap();
        export_sequence(&s, dir.path()).unwrap();
        let back = import_sequence(dir.path()).unwrap();
        assert_eq!(back, s);
        let gt = fs::read_to_string(dir.path().join(GROUNDTRUTH_FILE)).unwrap();
        assert_eq!(gt.lines().count(), 5);

        fs::write(dir.path().join(GROUNDTRUTH_FILE), "1,1,4,4\n").unwrap();
        assert!(import_sequence(dir.path()).is_err());
    }
}
