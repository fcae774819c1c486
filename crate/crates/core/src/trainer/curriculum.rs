use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::recurrent::{Scale, Variant};

/// Largest unroll count the curriculum reaches.
pub const MAX_UNROLLS: usize = 32;
/// Scheduled-sampling increments, in quarters.
pub const P_PRED_STEPS: u8 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumConfig {
    pub initial_batch: usize,
    pub initial_unrolls: usize,
    pub batch_floor: usize,
    /// Iterations per plateau window.
    pub plateau_window: usize,
    pub min_rel_improve: f64,
}

impl CurriculumConfig {
    pub fn full() -> Self {
        Self {
            initial_batch: 64,
            initial_unrolls: 2,
            batch_floor: 1,
            plateau_window: 200,
            min_rel_improve: 0.01,
        }
    }

    pub fn desk() -> Self {
        Self {
            initial_batch: 8,
            initial_unrolls: 2,
            ..Self::full()
        }
    }

    pub fn for_scale(scale: Scale) -> Self {
        match scale {
            Scale::Full => Self::full(),
            Scale::Desk => Self::desk(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pow2 = |n: usize| n.is_power_of_two() && (2..=MAX_UNROLLS).contains(&n);
        if self.initial_batch == 0 || self.batch_floor == 0 || !pow2(self.initial_unrolls) {
            return Err(Error::Config(
                "curriculum needs batch ≥ 1 and unrolls a power of two in 2..=32".into(),
            ));
        }
        if self.plateau_window < 2 || !(self.min_rel_improve >= 0.0) {
            return Err(Error::Config("plateau window must be ≥ 2".into()));
        }
        Ok(())
    }

    pub fn initial_state(&self) -> CurriculumState {
        CurriculumState {
            batch: self.initial_batch,
            unrolls: self.initial_unrolls,
            p_pred_quarters: 0,
        }
    }
}

/// Batch size, unroll count and scheduled-sampling probability.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurriculumState {
    pub batch: usize,
    pub unrolls: usize,
    /// Probability of using the prediction, in quarters (0..=4).
    pub p_pred_quarters: u8,
}

impl CurriculumState {
    pub fn new(batch: usize, unrolls: usize, p_pred: f64) -> Self {
        Self {
            batch,
            unrolls,
            p_pred_quarters: (p_pred * P_PRED_STEPS as f64).round() as u8,
        }
    }

    pub fn p_pred(&self) -> f64 {
        self.p_pred_quarters as f64 / P_PRED_STEPS as f64
    }

    pub fn is_saturated(&self) -> bool {
        self.unrolls >= MAX_UNROLLS && self.p_pred_quarters >= P_PRED_STEPS
    }
}

/// One plateau event: halve the batch and double the unrolls until 32
/// unrolls, then raise `p_pred` by 0.25 up to 1.
pub fn curriculum_advance(state: CurriculumState, batch_floor: usize) -> CurriculumState {
    if state.unrolls < MAX_UNROLLS {
        CurriculumState {
            batch: (state.batch / 2).max(batch_floor.max(1)),
            unrolls: (state.unrolls * 2).min(MAX_UNROLLS),
            ..state
        }
    } else {
        CurriculumState {
            p_pred_quarters: (state.p_pred_quarters + 1).min(P_PRED_STEPS),
            ..state
        }
    }
}

/// True when the mean of the latest `window` losses improves on the mean of
/// the window before it by less than `min_rel_improve` (relative).
pub fn plateau_detect(history: &[f64], window: usize, min_rel_improve: f64) -> bool {
    if window < 2 || history.len() < 2 * window {
        return false;
    }
    let n = history.len();
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let recent = mean(&history[n - window..]);
    let before = mean(&history[n - 2 * window..n - window]);
    if before <= 0.0 {
        return true;
    }
    (before - recent) / before < min_rel_improve
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "lowercase")]
pub enum LrPolicy {
    /// `values[i]` applies from `boundaries[i - 1]` (inclusive) onwards.
    Iteration {
        values: Vec<f64>,
        boundaries: Vec<u64>,
    },
    /// `values[i]` applies after `i` plateau events (last value sticks).
    Plateau { values: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    #[serde(flatten)]
    pub policy: LrPolicy,
    /// Multiplier applied to the extractor's parameters.
    #[serde(default = "unit")]
    pub extractor_scale: f64,
}

fn unit() -> f64 {
    1.0
}

impl LrSchedule {
    pub fn full(variant: Variant) -> Self {
        match variant {
            Variant::Plain => Self {
                policy: LrPolicy::Iteration {
                    values: vec![1e-5, 1e-6],
                    boundaries: vec![10_000],
                },
                extractor_scale: 1.0,
            },
            Variant::Residual | Variant::Dense => Self {
                policy: LrPolicy::Plateau {
                    values: vec![1e-4, 1e-5, 1e-6],
                },
                extractor_scale: 0.1,
            },
        }
    }

    /// Short-budget schedules for desk-scale runs trained from scratch.
    pub fn desk(variant: Variant) -> Self {
        match variant {
            Variant::Plain => Self {
                policy: LrPolicy::Iteration {
                    values: vec![2e-3, 2e-4],
                    boundaries: vec![1_500],
                },
                extractor_scale: 1.0,
            },
            Variant::Residual | Variant::Dense => Self {
                policy: LrPolicy::Plateau {
                    values: vec![2e-3, 1e-3, 3e-4],
                },
                extractor_scale: 1.0,
            },
        }
    }

    pub fn for_scale(variant: Variant, scale: Scale) -> Self {
        match scale {
            Scale::Full => Self::full(variant),
            Scale::Desk => Self::desk(variant),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let values = match &self.policy {
            LrPolicy::Iteration { values, boundaries } => {
                if boundaries.len() + 1 != values.len()
                    || boundaries.windows(2).any(|w| w[1] <= w[0])
                {
                    return Err(Error::Config(
                        "iteration schedule needs ascending boundaries and one more value".into(),
                    ));
                }
                values
            }
            LrPolicy::Plateau { values } => values,
        };
        if values.is_empty() || values.iter().any(|v| !(*v > 0.0)) || !(self.extractor_scale > 0.0)
        {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }

    /// Global learning rate at `iteration` after `plateaus` plateau events.
    pub fn lr(&self, iteration: u64, plateaus: u32) -> f64 {
        match &self.policy {
            LrPolicy::Iteration { values, boundaries } => {
                values[boundaries.partition_point(|&b| b <= iteration)]
            }
            LrPolicy::Plateau { values } => values[(plateaus as usize).min(values.len() - 1)],
        }
    }

    pub fn extractor_lr(&self, iteration: u64, plateaus: u32) -> f64 {
        self.lr(iteration, plateaus) * self.extractor_scale
    }
}

/// Learning rate for `variant` under the reference schedule.
pub fn lr_schedule(variant: Variant, iteration: u64, plateaus: u32) -> f64 {
    LrSchedule::full(variant).lr(iteration, plateaus)
}
