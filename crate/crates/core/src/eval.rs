//! Overlap metrics, success curves, lost-target counting and the one-pass
//! evaluation harness.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::synth::{Attribute, Sequence};
use crate::tracker::{ConstantTracker, NetworkTracker, ReplayTracker, Tracker, TrackerOptions};

/// Intersection over union of two boxes; 0 when disjoint.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuccessCurve {
    pub thresholds: Vec<f64>,
    pub fractions: Vec<f64>,
    pub auc: f64,
}

/// `0.00, 0.01, …, 1.00`.
pub fn default_thresholds() -> Vec<f64> {
    (0..=100).map(|i| i as f64 / 100.0).collect()
}

/// Fraction of IoUs strictly above each threshold, and their mean.
pub fn success_curve(ious: &[f64], thresholds: &[f64]) -> Result<SuccessCurve> {
    if ious.is_empty() {
        return Err(Error::invalid("success curve of an empty IoU list"));
    }
    if thresholds.is_empty() || thresholds.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid(
            "thresholds must be non-empty and strictly ascending",
        ));
    }
    if let Some(v) = ious.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(format!("IoU {v} outside [0, 1]")));
    }
    let mut sorted = ious.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let fractions: Vec<f64> = thresholds
        .iter()
        .map(|&t| {
            let at_or_below = sorted.partition_point(|&v| v <= t);
            (sorted.len() - at_or_below) as f64 / n
        })
        .collect();
    let auc = fractions.iter().sum::<f64>() / fractions.len() as f64;
    Ok(SuccessCurve {
        thresholds: thresholds.to_vec(),
        fractions,
        auc,
    })
}

/// One scored frame of a re-initializing run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub iou: f64,
    pub visible: bool,
    /// The tracker was (re)started from ground truth on this frame.
    pub reinit: bool,
}

/// Counts visible frames where the overlap drops to zero after a frame with
/// positive overlap (or a fresh initialization). Invisible frames never
/// count and do not disarm the detector.
pub fn lost_targets(records: &[FrameRecord]) -> usize {
    let mut armed = false;
    let mut lost = 0;
    for r in records {
        if r.reinit || r.iou > 0.0 {
            armed = true;
        } else if r.visible && armed {
            lost += 1;
            armed = false;
        }
    }
    lost
}

/// Builds a fresh tracker for each sequence.
pub trait TrackerFactory: Sync {
    fn name(&self) -> String;
    fn make<'s>(&'s self, seq: &Sequence) -> Box<dyn Tracker + 's>;
}

/// Replays ground truth: the harness upper bound.
pub struct OracleFactory;

impl TrackerFactory for OracleFactory {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn make<'s>(&'s self, seq: &Sequence) -> Box<dyn Tracker + 's> {
        Box::new(ReplayTracker::new(seq.boxes.clone()))
    }
}

/// Never moves from the initial box.
pub struct ConstantFactory;

impl TrackerFactory for ConstantFactory {
    fn name(&self) -> String {
        "constant".into()
    }

    fn make<'s>(&'s self, _seq: &Sequence) -> Box<dyn Tracker + 's> {
        Box::new(ConstantTracker::default())
    }
}

pub struct ModelFactory<'m> {
    pub model: &'m Model,
    pub options: TrackerOptions,
    pub label: String,
}

impl TrackerFactory for ModelFactory<'_> {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn make<'s>(&'s self, _seq: &Sequence) -> Box<dyn Tracker + 's> {
        Box::new(NetworkTracker::new(self.model, self.options))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceResult {
    pub name: String,
    pub tags: Vec<Attribute>,
    /// IoU of every frame after the first.
    pub ious: Vec<f64>,
    pub predictions: Vec<BBox>,
    /// Tracker initializations during the one-pass run.
    pub inits: usize,
    /// Loss events in the re-initializing run.
    pub lost: usize,
    pub fault: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tracker: String,
    pub seed: u64,
    pub config_hash: String,
    pub suite_hash: String,
    pub mean_iou: f64,
    pub lost_targets: usize,
    pub faulted: usize,
    pub curves: BTreeMap<String, SuccessCurve>,
    pub sequences: Vec<SequenceResult>,
}

impl EvalReport {
    /// Mean IoU over the frames of sequences accepted by `keep`.
    pub fn mean_iou_where<F: Fn(&SequenceResult) -> bool>(&self, keep: F) -> Option<f64> {
        let (s, n) = self
            .sequences
            .iter()
            .filter(|s| keep(s))
            .flat_map(|s| &s.ious)
            .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
        (n > 0).then(|| s / n as f64)
    }

    pub fn curve(&self, subset: &str) -> Option<&SuccessCurve> {
        self.curves.get(subset)
    }
}

/// One pass over a sequence: a single initialization from the first
/// ground-truth box, then a prediction for every later frame. After a
/// fault the remaining frames score 0.
pub fn track_sequence(tracker: &mut dyn Tracker, seq: &Sequence) -> SequenceResult {
    let mut res = SequenceResult {
        name: seq.name.clone(),
        tags: seq.tags.iter().copied().collect(),
        ious: Vec::with_capacity(seq.len().saturating_sub(1)),
        predictions: Vec::with_capacity(seq.len().saturating_sub(1)),
        inits: 0,
        lost: 0,
        fault: None,
    };
    if let Err(e) = tracker.init(&seq.frames[0], seq.boxes[0]) {
        res.fault = Some(e.to_string());
        res.ious = vec![0.0; seq.len() - 1];
        return res;
    }
    res.inits = 1;
    for t in 1..seq.len() {
        match tracker.step(&seq.frames[t]) {
            Ok(b) => {
                res.ious.push(iou(&b, &seq.boxes[t]));
                res.predictions.push(b);
            }
            Err(e) => {
                res.fault = Some(e.to_string());
                res.ious.resize(seq.len() - 1, 0.0);
                break;
            }
        }
    }
    res
}

/// Re-initializing run used for lost-target counting: after a loss the
/// tracker restarts from ground truth on the next visible frame.
pub fn reinit_records(tracker: &mut dyn Tracker, seq: &Sequence) -> Vec<FrameRecord> {
    let n = seq.len();
    let mut records = Vec::with_capacity(n);
    let mut t = 0;
    let mut need_init = true;
    let mut armed = false;
    while t < n {
        if need_init {
            if t > 0 && !seq.visible[t] {
                t += 1;
                continue;
            }
            if tracker.init(&seq.frames[t], seq.boxes[t]).is_err() {
                break;
            }
            records.push(FrameRecord {
                iou: 1.0,
                visible: seq.visible[t],
                reinit: true,
            });
            need_init = false;
            armed = true;
            t += 1;
            continue;
        }
        let Ok(b) = tracker.step(&seq.frames[t]) else {
            need_init = true;
            t += 1;
            continue;
        };
        let r = FrameRecord {
            iou: iou(&b, &seq.boxes[t]),
            visible: seq.visible[t],
            reinit: false,
        };
        records.push(r);
        if r.iou > 0.0 {
            armed = true;
        } else if r.visible && armed {
            armed = false;
            need_init = true;
        }
        t += 1;
    }
    records
}

/// Curves for `all` plus every attribute carried by at least one sequence.
pub fn attribute_report(
    results: &[SequenceResult],
    thresholds: &[f64],
) -> Result<BTreeMap<String, SuccessCurve>> {
    let mut curves = BTreeMap::new();
    let all: Vec<f64> = results
        .iter()
        .flat_map(|r| r.ious.iter().copied())
        .collect();
    curves.insert("all".to_string(), success_curve(&all, thresholds)?);
    for a in Attribute::ALL {
        let ious: Vec<f64> = results
            .iter()
            .filter(|r| r.tags.contains(&a))
            .flat_map(|r| r.ious.iter().copied())
            .collect();
        if ious.is_empty() {
            log::warn!("no frames for subset {}; curve omitted", a.name());
            continue;
        }
        curves.insert(a.name().to_string(), success_curve(&ious, thresholds)?);
    }
    Ok(curves)
}

/// Runs the one-pass evaluation and the lost-target pass over `suite`.
/// Sequences run in parallel; results keep suite order.
pub fn run_ope(
    factory: &dyn TrackerFactory,
    suite: &[Sequence],
    seed: u64,
    config_hash: &str,
) -> Result<EvalReport> {
    if suite.is_empty() {
        return Err(Error::invalid("empty suite"));
    }
    if let Some(s) = suite.iter().find(|s| s.len() < 2) {
        return Err(Error::invalid(format!(
            "sequence {} has fewer than 2 frames",
            s.name
        )));
    }
    let sequences: Vec<SequenceResult> = suite
        .par_iter()
        .map(|seq| {
            let mut t = factory.make(seq);
            let mut res = track_sequence(t.as_mut(), seq);
            let mut t = factory.make(seq);
            res.lost = lost_targets(&reinit_records(t.as_mut(), seq));
            res
        })
        .collect();
    let curves = attribute_report(&sequences, &default_thresholds())?;
    let frames: usize = sequences.iter().map(|s| s.ious.len()).sum();
    let mean_iou = sequences.iter().flat_map(|s| &s.ious).sum::<f64>() / frames as f64;
    Ok(EvalReport {
        tracker: factory.name(),
        seed,
        config_hash: config_hash.to_string(),
        suite_hash: suite_hash(suite),
        mean_iou,
        lost_targets: sequences.iter().map(|s| s.lost).sum(),
        faulted: sequences.iter().filter(|s| s.fault.is_some()).count(),
        curves,
        sequences,
    })
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Content hash of a suite: names, pixels, boxes, visibility and tags.
pub fn suite_hash(suite: &[Sequence]) -> String {
    let mut h = Sha256::new();
    for s in suite {
        h.update(s.name.as_bytes());
        h.update((s.len() as u64).to_le_bytes());
        for f in &s.frames {
            h.update((f.width as u64).to_le_bytes());
            h.update((f.height as u64).to_le_bytes());
            for v in &f.data {
                h.update(v.to_le_bytes());
            }
        }
        for b in &s.boxes {
            for v in [b.cx, b.cy, b.w, b.h] {
                h.update(v.to_le_bytes());
            }
        }
        h.update(s.visible.iter().map(|&v| v as u8).collect::<Vec<_>>());
        for t in &s.tags {
            h.update(t.name().as_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub const REPORT_FILE: &str = "report.json";

pub fn curve_file_name(subset: &str) -> String {
    format!("curve_{subset}.csv")
}

pub fn curve_csv(c: &SuccessCurve) -> String {
    let mut s = String::new();
    for (t, f) in c.thresholds.iter().zip(&c.fractions) {
        s.push_str(&format!("{t:.6},{f:.6}\n"));
    }
    s
}

/// Writes `report.json` and one `curve_<subset>.csv` per curve into `dir`.
pub fn export_report(report: &EvalReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let path = dir.join(REPORT_FILE);
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    for (name, c) in &report.curves {
        let p = dir.join(curve_file_name(name));
        fs::write(&p, curve_csv(c)).map_err(|e| Error::io(&p, e))?;
        written.push(p);
    }
    Ok(written)
}

pub fn load_report(path: &Path) -> Result<EvalReport> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&raw).map_err(|e| Error::format(path, e.to_string()))
}
