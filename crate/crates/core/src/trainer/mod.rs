//! Curriculum training with backpropagation through time over short
//! sequence snippets.

mod augment;
mod curriculum;
mod log;

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use augment::{augment, sample_snippet, AugmentConfig, Snippet};
pub use curriculum::{
    curriculum_advance, lr_schedule, plateau_detect, CurriculumConfig, CurriculumState, LrPolicy,
    LrSchedule, MAX_UNROLLS, P_PRED_STEPS,
};
pub use log::{LogEntry, TrainLog, Transition, LOG_HEADER};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::extractor::Mode;
use crate::model::{CheckpointMeta, Model, Network};
use crate::numeric::{AdamConfig, AdamState, Graph, Tensor, BN_MOMENTUM};
use crate::recurrent::{RecurrentState, Scale, Variant};
use crate::synth::Sequence;
use crate::tracker::{
    crop_with_context, decode_box, encode_box, teacher_uses_prediction, CropGeometry,
};

pub const CHECKPOINT_FILE: &str = "model.rtlb";
pub const LOG_FILE: &str = "train_log.csv";
pub const SUMMARY_FILE: &str = "train_summary.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    /// Iteration budget.
    pub iterations: u64,
    /// Stop early once a logged loss drops below this.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_loss: Option<f64>,
    /// Checkpoint period in iterations; 0 writes only at transitions and at the end.
    pub checkpoint_every: u64,
    pub curriculum: CurriculumConfig,
    pub lr: LrSchedule,
    pub augment: AugmentConfig,
    /// Once the curriculum batch drops below this, batch-norm statistics
    /// are re-estimated over a large sample and then frozen. 0 never freezes.
    #[serde(default = "default_bn_freeze")]
    pub bn_freeze_below: usize,
}

fn default_bn_freeze() -> usize {
    BN_FREEZE_BELOW
}

/// Default batch size under which normalization statistics are frozen.
pub const BN_FREEZE_BELOW: usize = 8;
/// Snippets drawn to re-estimate normalization statistics.
pub const BN_CALIBRATION_SAMPLES: usize = 256;

impl TrainConfig {
    pub fn for_variant(variant: Variant, scale: Scale) -> Self {
        let (iterations, checkpoint_every) = match scale {
            Scale::Full => (200_000, 5_000),
            Scale::Desk => (2_000, 500),
        };
        Self {
            seed: 1,
            iterations,
            target_loss: None,
            checkpoint_every,
            curriculum: CurriculumConfig::for_scale(scale),
            lr: LrSchedule::for_scale(variant, scale),
            augment: AugmentConfig::default(),
            bn_freeze_below: BN_FREEZE_BELOW,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.curriculum.validate()?;
        self.lr.validate()?;
        self.augment.validate()?;
        if self.target_loss.is_some_and(|t| !(t > 0.0)) {
            return Err(Error::Config("target loss must be positive".into()));
        }
        Ok(())
    }
}

/// How often each source supplied a crop reference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RefCounters {
    pub from_gt: u64,
    pub from_pred: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub entry: LogEntry,
    pub transition: Option<Transition>,
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: TrainLog,
    /// Final checkpoint, when an output directory was given.
    pub checkpoint: Option<PathBuf>,
}

/// Deterministic per-snippet stream from (run seed, iteration, slot).
fn slot_rng(seed: u64, iteration: u64, slot: usize, domain: u64) -> ChaCha8Rng {
    let mut x = seed;
    for v in [iteration, slot as u64, domain] {
        x = splitmix(x ^ splitmix(v));
    }
    ChaCha8Rng::seed_from_u64(x)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const DATA_STREAM: u64 = 1;
const TEACHER_STREAM: u64 = 2;
const CALIBRATION_STREAM: u64 = 3;

/// Crops of one unroll step for the whole batch.
struct StepCrops {
    prev: Tensor,
    cur: Tensor,
    geoms: Vec<CropGeometry>,
}

pub struct Trainer<'d> {
    pub model: Model,
    pub config: TrainConfig,
    dataset: &'d [Sequence],
    adam: AdamState,
    pub curriculum: CurriculumState,
    /// Completed iterations.
    pub iteration: u64,
    pub plateaus: u32,
    /// Losses since the last plateau event.
    history: Vec<f64>,
    pub log: TrainLog,
    pub counters: RefCounters,
    /// Whether normalization statistics have been re-estimated and frozen.
    pub bn_frozen: bool,
    out_dir: Option<PathBuf>,
}

impl<'d> Trainer<'d> {
    pub fn new(
        model: Model,
        config: TrainConfig,
        dataset: &'d [Sequence],
        config_hash: &str,
    ) -> Result<Self> {
        config.validate()?;
        if dataset.is_empty() {
            return Err(Error::Config("training needs a non-empty dataset".into()));
        }
        let channels = model.net.config.extractor.input_channels;
        if let Some(s) = dataset
            .iter()
            .find(|s| s.frames.iter().any(|f| f.channels != channels))
        {
            return Err(Error::Config(format!(
                "sequence {} does not have {channels}-channel frames",
                s.name
            )));
        }
        let lr = config.lr.lr(0, 0);
        Ok(Self {
            model,
            adam: AdamState::new(AdamConfig::with_lr(lr))?,
            curriculum: config.curriculum.initial_state(),
            log: TrainLog::new(config.seed, config_hash),
            config,
            dataset,
            iteration: 0,
            plateaus: 0,
            history: Vec::new(),
            counters: RefCounters::default(),
            bn_frozen: false,
            out_dir: None,
        })
    }

    /// Writes checkpoints and logs under `dir`.
    pub fn with_output(mut self, dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        self.out_dir = Some(dir);
        Ok(self)
    }

    /// Continues a run from a checkpoint written by [`Trainer::save_checkpoint`].
    pub fn resume(
        path: &Path,
        config: TrainConfig,
        dataset: &'d [Sequence],
        config_hash: &str,
    ) -> Result<Self> {
        let (model, meta, extra) = Model::load(path)?;
        if meta.seed != config.seed {
            ::log::warn!("resuming seed {} run with seed {}", meta.seed, config.seed);
        }
        let mut t = Trainer::new(model, config, dataset, config_hash)?;
        t.adam.import(&t.model.params, &extra)?;
        let find = |name: &str| {
            extra
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, v)| v)
                .ok_or_else(|| Error::format(path, format!("missing record {name}")))
        };
        t.iteration = find("train.iteration")?.data()[0] as u64;
        let c = find("train.curriculum")?.data();
        if c.len() != 5 {
            return Err(Error::format(path, "train.curriculum must hold 5 values"));
        }
        t.curriculum = CurriculumState {
            batch: c[0] as usize,
            unrolls: c[1] as usize,
            p_pred_quarters: c[2] as u8,
        };
        t.plateaus = c[3] as u32;
        t.bn_frozen = c[4] != 0.0;
        let optional = |name: &str| extra.iter().find(|(n, _)| n == name).map(|(_, v)| v);
        t.history = optional("train.history").map_or_else(Vec::new, |h| h.data().to_vec());
        t.log
            .restore(optional("train.log"), optional("train.transitions"));
        Ok(t)
    }

    pub fn lr(&self) -> f64 {
        self.config.lr.lr(self.iteration, self.plateaus)
    }

    fn input_size(&self) -> usize {
        self.model.net.config.extractor.input_size
    }

    fn should_freeze(&self) -> bool {
        self.model.net.extractor.has_batchnorm()
            && self.curriculum.batch < self.config.bn_freeze_below
    }

    /// Replaces the running normalization statistics by the pooled mean and
    /// variance of the projection over freshly sampled snippets, using the
    /// current weights.
    pub fn calibrate_batchnorm(&mut self) -> Result<()> {
        if !self.model.net.extractor.has_batchnorm() {
            return Ok(());
        }
        let chunk = 16;
        let (seed, it, aug, dataset) = (
            self.config.seed,
            self.iteration,
            self.config.augment,
            self.dataset,
        );
        let width = self.model.net.extractor.output_width();
        let mut sum = vec![0.0; width];
        let mut sq = vec![0.0; width];
        let mut rows = 0usize;
        for start in (0..BN_CALIBRATION_SAMPLES).step_by(chunk) {
            let snippets = (start..start + chunk)
                .into_par_iter()
                .map(|slot| {
                    let mut rng = slot_rng(seed, it, slot, CALIBRATION_STREAM);
                    let s = sample_snippet(dataset, 2, &mut rng)?;
                    Ok(augment(s, &aug, &mut rng))
                })
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<BBox> = snippets.iter().map(|s| s.boxes[0]).collect();
            let crops = self.crops(&snippets, 0, &refs)?;
            let mut g = Graph::new();
            let out = self.model.net.extractor.extract(
                &mut g,
                &self.model.params,
                &crops.prev,
                &crops.cur,
                Mode::Infer,
            )?;
            for row in g.value(out.pre_norm).data().chunks(width) {
                for ((s, q), v) in sum.iter_mut().zip(&mut sq).zip(row) {
                    *s += v;
                    *q += v * v;
                }
                rows += 1;
            }
        }
        let n = rows as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let var: Vec<f64> = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n - m * m).max(0.0))
            .collect();
        let stats = crate::numeric::BatchStats { mean, var };
        self.model
            .net
            .extractor
            .update_running_stats(&mut self.model.params, &stats, 0.0);
        Ok(())
    }

    /// One optimization step under the current curriculum.
    pub fn step(&mut self) -> Result<StepReport> {
        if !self.bn_frozen && self.should_freeze() {
            self.calibrate_batchnorm()?;
            self.bn_frozen = true;
            ::log::info!(
                "iteration {}: normalization statistics frozen",
                self.iteration
            );
        }
        let mode = if self.bn_frozen {
            Mode::Infer
        } else {
            Mode::Train
        };
        let it = self.iteration;
        let cur = self.curriculum;
        let (b, t) = (cur.batch, cur.unrolls);
        let lr = self.lr();
        self.adam.set_lr(lr)?;

        let (seed, aug, dataset) = (self.config.seed, self.config.augment, self.dataset);
        let snippets = (0..b)
            .into_par_iter()
            .map(|slot| {
                let mut rng = slot_rng(seed, it, slot, DATA_STREAM);
                let s = sample_snippet(dataset, t + 1, &mut rng)?;
                Ok(augment(s, &aug, &mut rng))
            })
            .collect::<Result<Vec<_>>>()?;

        let refs = self.references(&snippets, cur)?;
        let mut prev = Vec::with_capacity(t);
        let mut curr = Vec::with_capacity(t);
        let mut targets = Vec::with_capacity(t);
        for j in 0..t {
            let step_refs: Vec<BBox> = refs.iter().map(|r| r[j]).collect();
            let crops = self.crops(&snippets, j, &step_refs)?;
            let target: Vec<f64> = snippets
                .iter()
                .zip(&crops.geoms)
                .flat_map(|(s, geom)| encode_box(&s.boxes[j + 1], geom))
                .collect();
            prev.push(crops.prev);
            curr.push(crops.cur);
            targets.push(Tensor::new(vec![b, 4], target)?);
        }

        let mut g = Graph::new();
        let state = self.model.zero_state(b);
        let net = &self.model.net;
        let u = net.unroll(&mut g, &self.model.params, &prev, &curr, &state, mode)?;
        let mut total = None;
        for (out, target) in u.outputs.iter().zip(targets) {
            let tv = g.constant(target);
            let l = g.mae(*out, tv)?;
            total = Some(match total {
                None => l,
                Some(acc) => g.add(acc, l)?,
            });
        }
        let total = total.expect("at least one unroll");
        let loss = g.value(total).data()[0] / t as f64;
        if !loss.is_finite() {
            return Err(self.abort("non-finite loss", true));
        }
        let grads = g.backward(total)?;
        self.model.params.zero_grads();
        grads.write_to(&mut self.model.params);
        if let Some((_, p)) = self
            .model
            .params
            .iter()
            .find(|(_, p)| p.grad.as_ref().is_some_and(|gr| !gr.all_finite()))
        {
            let reason = format!("non-finite gradient for {}", p.name);
            return Err(self.abort(&reason, true));
        }
        let ext_scale = self.config.lr.extractor_scale;
        self.adam.step(&mut self.model.params, |p| {
            if Network::is_extractor_param(&p.name) {
                ext_scale
            } else {
                1.0
            }
        })?;
        if let Some(stats) = &u.stats {
            self.model.net.extractor.update_running_stats(
                &mut self.model.params,
                stats,
                BN_MOMENTUM,
            );
        }
        if let Some(name) = self.model.params.first_non_finite() {
            let reason = format!("update made {name} non-finite");
            return Err(self.abort(&reason, false));
        }

        let entry = LogEntry {
            iteration: it,
            loss,
            batch: b,
            unrolls: t,
            p_pred: cur.p_pred(),
            lr,
        };
        self.log.push(entry)?;
        self.history.push(loss);
        self.iteration += 1;
        let cc = self.config.curriculum;
        let transition = if plateau_detect(&self.history, cc.plateau_window, cc.min_rel_improve) {
            Some(self.plateau_event()?)
        } else {
            None
        };
        let every = self.config.checkpoint_every;
        if transition.is_none() && every > 0 && self.iteration % every == 0 {
            self.persist()?;
        }
        Ok(StepReport { entry, transition })
    }

    /// Applies a plateau event: advances the curriculum, clears the
    /// plateau window and checkpoints.
    pub fn plateau_event(&mut self) -> Result<Transition> {
        let from = self.curriculum;
        self.curriculum = curriculum_advance(from, self.config.curriculum.batch_floor);
        self.plateaus += 1;
        self.history.clear();
        let t = Transition {
            iteration: self.iteration.saturating_sub(1),
            from,
            to: self.curriculum,
            plateaus: self.plateaus,
        };
        self.log.push_transition(t)?;
        ::log::info!(
            "iteration {}: curriculum ({}, {}, {}) -> ({}, {}, {})",
            t.iteration,
            from.batch,
            from.unrolls,
            from.p_pred(),
            t.to.batch,
            t.to.unrolls,
            t.to.p_pred()
        );
        if let Some(dir) = &self.out_dir {
            let path = dir.join(format!("transition-{:06}.rtlb", self.iteration));
            self.save_checkpoint(&path)?;
            self.persist()?;
        }
        Ok(t)
    }

    /// Reference box per slot and unroll step. Step `j` crops frames `j` and
    /// `j + 1` around `refs[slot][j]`; step 0 always uses the ground truth.
    fn references(&mut self, snippets: &[Snippet], cur: CurriculumState) -> Result<Vec<Vec<BBox>>> {
        let (b, t) = (cur.batch, cur.unrolls);
        let mut refs: Vec<Vec<BBox>> = snippets.iter().map(|s| vec![s.boxes[0]]).collect();
        self.counters.from_gt += b as u64;
        if cur.p_pred_quarters == 0 {
            for (r, s) in refs.iter_mut().zip(snippets) {
                r.extend_from_slice(&s.boxes[1..t]);
            }
            self.counters.from_gt += (b * (t - 1)) as u64;
            return Ok(refs);
        }
        // Roll the current model forward without gradients to get the
        // predictions the scheduled sampling can pick from.
        let p = cur.p_pred();
        let mut rngs: Vec<ChaCha8Rng> = (0..b)
            .map(|slot| slot_rng(self.config.seed, self.iteration, slot, TEACHER_STREAM))
            .collect();
        let mut state = self.model.zero_state(b);
        for j in 0..t - 1 {
            let step_refs: Vec<BBox> = refs.iter().map(|r| r[j]).collect();
            let crops = self.crops(snippets, j, &step_refs)?;
            let mut g = Graph::new();
            let u = self.model.net.unroll(
                &mut g,
                &self.model.params,
                &[crops.prev],
                &[crops.cur],
                &state,
                Mode::Infer,
            )?;
            let raw = g.value(u.outputs[0]).data().to_vec();
            state = RecurrentState::from_graph(&g, &u.states);
            for slot in 0..b {
                let pred = decode_box(&raw[slot * 4..slot * 4 + 4], &crops.geoms[slot])
                    .map_err(|e| self.abort(&format!("rollout: {e}"), true))?
                    .bbox;
                let gt = snippets[slot].boxes[j + 1];
                if teacher_uses_prediction(p, &mut rngs[slot]) {
                    self.counters.from_pred += 1;
                    refs[slot].push(pred);
                } else {
                    self.counters.from_gt += 1;
                    refs[slot].push(gt);
                }
            }
        }
        Ok(refs)
    }

    fn crops(&self, snippets: &[Snippet], j: usize, refs: &[BBox]) -> Result<StepCrops> {
        let res = self.input_size();
        let per: Vec<(Tensor, Tensor, CropGeometry)> = snippets
            .par_iter()
            .zip(refs)
            .map(|(s, r)| {
                let (p, geom) = crop_with_context(&s.frames[j], r, res)?;
                let (c, _) = crop_with_context(&s.frames[j + 1], r, res)?;
                Ok((p, c, geom))
            })
            .collect::<Result<_>>()?;
        let shape = self.model.net.extractor.crop_shape(snippets.len()).to_vec();
        let mut prev = Vec::with_capacity(shape.iter().product());
        let mut cur = Vec::with_capacity(prev.capacity());
        let mut geoms = Vec::with_capacity(per.len());
        for (p, c, geom) in per {
            prev.extend_from_slice(p.data());
            cur.extend_from_slice(c.data());
            geoms.push(geom);
        }
        Ok(StepCrops {
            prev: Tensor::new(shape.clone(), prev)?,
            cur: Tensor::new(shape, cur)?,
            geoms,
        })
    }

    /// Builds the abort error, saving the current parameters first when
    /// they are still known to be finite.
    fn abort(&self, reason: &str, params_good: bool) -> Error {
        let mut checkpoint = None;
        if let Some(dir) = &self.out_dir {
            let path = dir.join(CHECKPOINT_FILE);
            if params_good {
                match self.save_checkpoint(&path).and_then(|_| self.write_logs()) {
                    Ok(()) => checkpoint = Some(path),
                    Err(e) => ::log::error!("could not save checkpoint on abort: {e}"),
                }
            } else if path.exists() {
                checkpoint = Some(path);
            }
        }
        Error::TrainingAborted {
            iteration: self.iteration,
            reason: reason.to_string(),
            checkpoint,
        }
    }

    pub fn checkpoint_meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            iteration: self.iteration,
            seed: self.config.seed,
            config_hash: self.log.config_hash.clone(),
            model: self.model.net.config.clone(),
        }
    }

    /// Parameters plus optimizer and curriculum state, enough to resume.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut extra = self.adam.export(&self.model.params);
        let c = self.curriculum;
        extra.push((
            "train.iteration".into(),
            Tensor::scalar(self.iteration as f64),
        ));
        extra.push((
            "train.curriculum".into(),
            Tensor::row(&[
                c.batch as f64,
                c.unrolls as f64,
                c.p_pred_quarters as f64,
                self.plateaus as f64,
                f64::from(u8::from(self.bn_frozen)),
            ]),
        ));
        if !self.history.is_empty() {
            extra.push((
                "train.history".into(),
                Tensor::new(vec![self.history.len()], self.history.clone())?,
            ));
        }
        extra.extend(self.log.to_records());
        self.model.save(path, &self.checkpoint_meta(), &extra)
    }

    fn write_logs(&self) -> Result<()> {
        let Some(dir) = &self.out_dir else {
            return Ok(());
        };
        self.log.write_csv(&dir.join(LOG_FILE))?;
        let path = dir.join(SUMMARY_FILE);
        let text =
            serde_json::to_string_pretty(&self.log).map_err(|e| Error::invalid(e.to_string()))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Writes the rolling checkpoint and the logs, if an output directory is set.
    pub fn persist(&self) -> Result<Option<PathBuf>> {
        let Some(dir) = &self.out_dir else {
            return Ok(None);
        };
        let path = dir.join(CHECKPOINT_FILE);
        self.save_checkpoint(&path)?;
        self.write_logs()?;
        Ok(Some(path))
    }

    fn done(&self) -> bool {
        self.iteration >= self.config.iterations
            || self
                .config
                .target_loss
                .zip(self.log.entries.last())
                .is_some_and(|(target, e)| e.loss < target)
    }

    /// Trains until the iteration budget or the target loss is reached,
    /// calling `on_transition` for every plateau event.
    pub fn run(&mut self, mut on_transition: impl FnMut(&Transition)) -> Result<Option<PathBuf>> {
        while !self.done() {
            let report = self.step()?;
            if let Some(t) = &report.transition {
                on_transition(t);
            }
        }
        self.persist()
    }

    pub fn into_outcome(self, checkpoint: Option<PathBuf>) -> TrainOutcome {
        TrainOutcome {
            model: self.model,
            log: self.log,
            checkpoint,
        }
    }
}

/// Trains `model` on `dataset`, writing checkpoints and logs to `out_dir`
/// when given.
pub fn train(
    model: Model,
    config: &TrainConfig,
    dataset: &[Sequence],
    config_hash: &str,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(model, config.clone(), dataset, config_hash)?;
    if let Some(dir) = out_dir {
        trainer = trainer.with_output(dir)?;
    }
    let checkpoint = trainer.run(|_| {})?;
    Ok(trainer.into_outcome(checkpoint))
}
