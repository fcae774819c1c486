use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Tensor;
use crate::trainer::curriculum::CurriculumState;

pub const LOG_HEADER: &str = "iteration,loss,batch,unrolls,p_pred,lr";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iteration: u64,
    /// Loss per unroll step.
    pub loss: f64,
    pub batch: usize,
    pub unrolls: usize,
    pub p_pred: f64,
    pub lr: f64,
}

/// A plateau event and the curriculum it led to.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    /// Last iteration trained under `from`.
    pub iteration: u64,
    pub from: CurriculumState,
    pub to: CurriculumState,
    /// Plateau events so far, including this one.
    pub plateaus: u32,
}

/// Append-only record of a training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub seed: u64,
    pub config_hash: String,
    pub entries: Vec<LogEntry>,
    pub transitions: Vec<Transition>,
}

impl TrainLog {
    pub fn new(seed: u64, config_hash: impl Into<String>) -> Self {
        Self {
            seed,
            config_hash: config_hash.into(),
            ..Self::default()
        }
    }

    pub fn push(&mut self, entry: LogEntry) -> Result<()> {
        if let Some(last) = self.entries.last() {
            if entry.iteration <= last.iteration {
                return Err(Error::invalid(format!(
                    "log stamp {} after {}",
                    entry.iteration, last.iteration
                )));
            }
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn push_transition(&mut self, t: Transition) -> Result<()> {
        if self
            .transitions
            .last()
            .is_some_and(|l| t.iteration < l.iteration)
        {
            return Err(Error::invalid("transition stamps must not decrease"));
        }
        self.transitions.push(t);
        Ok(())
    }

    pub fn losses(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.loss).collect()
    }

    /// Mean loss over the first and the last `window` entries.
    pub fn smoothed(&self, window: usize) -> Option<(f64, f64)> {
        let n = self.entries.len();
        if window == 0 || n < window {
            return None;
        }
        let mean = |s: &[LogEntry]| s.iter().map(|e| e.loss).sum::<f64>() / s.len() as f64;
        Some((
            mean(&self.entries[..window]),
            mean(&self.entries[n - window..]),
        ))
    }

    /// CSV with a header line. Floats use the shortest representation that
    /// parses back to the same bits.
    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(48 * (self.entries.len() + 1));
        s.push_str(LOG_HEADER);
        s.push('\n');
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{},{:?},{},{},{},{:?}",
                e.iteration, e.loss, e.batch, e.unrolls, e.p_pred, e.lr
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn parse_csv(text: &str) -> std::result::Result<Vec<LogEntry>, String> {
        let mut lines = text.lines();
        if lines.next() != Some(LOG_HEADER) {
            return Err("missing header".into());
        }
        lines
            .enumerate()
            .map(|(i, line)| {
                let f: Vec<&str> = line.split(',').collect();
                let bad = |_| format!("line {}: {line:?}", i + 2);
                if f.len() != 6 {
                    return Err(format!("line {}: expected 6 fields", i + 2));
                }
                Ok(LogEntry {
                    iteration: f[0].parse().map_err(|_| bad(()))?,
                    loss: f[1].parse().map_err(|_| bad(()))?,
                    batch: f[2].parse().map_err(|_| bad(()))?,
                    unrolls: f[3].parse().map_err(|_| bad(()))?,
                    p_pred: f[4].parse().map_err(|_| bad(()))?,
                    lr: f[5].parse().map_err(|_| bad(()))?,
                })
            })
            .collect()
    }

    /// Entries and transitions as tensors, so a checkpoint can carry them.
    pub(crate) fn to_records(&self) -> Vec<(String, Tensor)> {
        let entries: Vec<f64> = self
            .entries
            .iter()
            .flat_map(|e| {
                [
                    e.iteration as f64,
                    e.loss,
                    e.batch as f64,
                    e.unrolls as f64,
                    e.p_pred,
                    e.lr,
                ]
            })
            .collect();
        let transitions: Vec<f64> = self
            .transitions
            .iter()
            .flat_map(|t| {
                [
                    t.iteration as f64,
                    t.from.batch as f64,
                    t.from.unrolls as f64,
                    t.from.p_pred_quarters as f64,
                    t.to.batch as f64,
                    t.to.unrolls as f64,
                    t.to.p_pred_quarters as f64,
                    t.plateaus as f64,
                ]
            })
            .collect();
        // Empty tables are omitted: tensors need positive extents.
        let mut out = Vec::new();
        if !self.entries.is_empty() {
            out.push((
                "train.log".into(),
                Tensor::new(vec![self.entries.len(), 6], entries).expect("6 columns"),
            ));
        }
        if !self.transitions.is_empty() {
            out.push((
                "train.transitions".into(),
                Tensor::new(vec![self.transitions.len(), 8], transitions).expect("8 columns"),
            ));
        }
        out
    }

    pub(crate) fn restore(&mut self, log: Option<&Tensor>, transitions: Option<&Tensor>) {
        self.entries = log
            .map_or(&[][..], |t| t.data())
            .chunks_exact(6)
            .map(|r| LogEntry {
                iteration: r[0] as u64,
                loss: r[1],
                batch: r[2] as usize,
                unrolls: r[3] as usize,
                p_pred: r[4],
                lr: r[5],
            })
            .collect();
        let state = |b: f64, u: f64, q: f64| CurriculumState {
            batch: b as usize,
            unrolls: u as usize,
            p_pred_quarters: q as u8,
        };
        self.transitions = transitions
            .map_or(&[][..], |t| t.data())
            .chunks_exact(8)
            .map(|r| Transition {
                iteration: r[0] as u64,
                from: state(r[1], r[2], r[3]),
                to: state(r[4], r[5], r[6]),
                plateaus: r[7] as u32,
            })
            .collect();
    }
}
