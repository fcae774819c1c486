//! Extractor, recurrent module and regression head wired together.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extractor::{config_for_variant, Extractor, ExtractorConfig, Mode, PARAM_PREFIX};
use crate::numeric::{checkpoint, msra_init, BatchStats, Graph, ParamId, ParamStore, Tensor, Var};
use crate::recurrent::{
    LstmState, RecurrentModule, RecurrentModuleConfig, RecurrentState, Scale, Variant,
};

/// Head bias: a zero-weight head decodes to the reference box itself.
pub const HEAD_BIAS: [f64; 4] = [0.25, 0.25, 0.75, 0.75];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub extractor: ExtractorConfig,
    pub rnn: RecurrentModuleConfig,
}

impl ModelConfig {
    pub fn for_variant(variant: Variant, scale: Scale) -> Self {
        Self {
            extractor: config_for_variant(variant, scale),
            rnn: RecurrentModuleConfig::for_scale(variant, scale),
        }
    }

    pub fn variant(&self) -> Variant {
        self.rnn.variant
    }

    /// Checks every cross-module width constraint.
    pub fn validate(&self) -> Result<()> {
        self.extractor.validate()?;
        self.rnn.validate()?;
        if self.extractor.fc_width != self.rnn.feature_width {
            return Err(Error::Config(format!(
                "extractor width {} != recurrent feature width {}",
                self.extractor.fc_width, self.rnn.feature_width
            )));
        }
        Ok(())
    }

    pub fn head_param_count(&self) -> usize {
        self.rnn.output_width() * 4 + 4
    }

    /// Closed-form trainable total of the whole network.
    pub fn param_count(&self) -> Result<usize> {
        self.validate()?;
        Ok(self.extractor.param_count() + self.rnn.param_count()? + self.head_param_count())
    }
}

/// Architecture and parameter handles; the values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Network {
    pub config: ModelConfig,
    pub extractor: Extractor,
    pub rnn: RecurrentModule,
    head_w: ParamId,
    head_b: ParamId,
}

/// Output of an unrolled forward pass.
pub struct Unrolled {
    /// Raw head outputs per step, `[N × 4]` each.
    pub outputs: Vec<Var>,
    pub states: Vec<LstmState>,
    pub stats: Option<BatchStats>,
}

impl Network {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let extractor = Extractor::new(store, config.extractor.clone(), rng)?;
        let rnn = RecurrentModule::new(store, config.rnn, rng)?;
        let width = config.rnn.output_width();
        let head_w = store.add_trainable("head.w", msra_init(&[width, 4], width, rng)?)?;
        let head_b = store.add_trainable("head.b", Tensor::new(vec![4], HEAD_BIAS.to_vec())?)?;
        Ok(Self {
            config,
            extractor,
            rnn,
            head_w,
            head_b,
        })
    }

    pub fn head_ids(&self) -> (ParamId, ParamId) {
        (self.head_w, self.head_b)
    }

    pub fn head(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.head_w);
        let b = g.param(store, self.head_b);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }

    /// Runs `T = prev.len()` steps for a batch of `N` sequences. The crops of
    /// every step go through the extractor in one batch of `T·N` rows, so
    /// train-mode normalization sees the whole unroll.
    pub fn unroll(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        prev: &[Tensor],
        cur: &[Tensor],
        state: &RecurrentState,
        mode: Mode,
    ) -> Result<Unrolled> {
        if prev.is_empty() || prev.len() != cur.len() {
            return Err(Error::invalid(
                "unroll needs matching, non-empty crop lists",
            ));
        }
        let n = prev[0].shape()[0];
        let stack = |parts: &[Tensor]| -> Result<Tensor> {
            let mut shape = parts[0].shape().to_vec();
            let mut data = Vec::with_capacity(parts.len() * parts[0].len());
            for p in parts {
                if p.shape() != shape.as_slice() {
                    return Err(Error::shape("unroll", &shape, p.shape()));
                }
                data.extend_from_slice(p.data());
            }
            shape[0] *= parts.len();
            Tensor::new(shape, data)
        };
        let out = self
            .extractor
            .extract(g, store, &stack(prev)?, &stack(cur)?, mode)?;
        let mut states = state.to_graph(g);
        if states.first().map(|s| g.value(s.h).shape()[0]) != Some(n) {
            return Err(Error::invalid("recurrent state batch does not match crops"));
        }
        let mut outputs = Vec::with_capacity(prev.len());
        for t in 0..prev.len() {
            let x = g.slice(out.features, 0, t * n, n)?;
            let (y, next) = self.rnn.step(g, store, x, &states)?;
            states = next;
            outputs.push(self.head(g, store, y)?);
        }
        Ok(Unrolled {
            outputs,
            states,
            stats: out.stats,
        })
    }

    /// Whether a parameter belongs to the convolutional/projection front end.
    pub fn is_extractor_param(name: &str) -> bool {
        name.starts_with(PARAM_PREFIX)
    }
}

/// A network together with its parameter values.
#[derive(Clone, Debug)]
pub struct Model {
    pub net: Network,
    pub params: ParamStore,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = Network::new(&mut params, config, rng)?;
        Ok(Self { net, params })
    }

    pub fn variant(&self) -> Variant {
        self.net.config.variant()
    }

    pub fn zero_state(&self, batch: usize) -> RecurrentState {
        self.net.rnn.zero_state(batch)
    }

    /// Writes parameters (plus any `extra` records) to `path` and the
    /// architecture to the TOML sidecar next to it.
    pub fn save(
        &self,
        path: &Path,
        meta: &CheckpointMeta,
        extra: &[(String, Tensor)],
    ) -> Result<()> {
        if meta.model != self.net.config {
            return Err(Error::invalid(
                "checkpoint metadata describes a different architecture",
            ));
        }
        let mut records = self.params.named_tensors();
        records.extend_from_slice(extra);
        let text = toml::to_string(meta).map_err(|e| Error::invalid(format!("sidecar: {e}")))?;
        let sidecar = sidecar_path(path);
        let tmp = path.with_extension("rtlb.tmp");
        checkpoint::save(&tmp, &records)?;
        std::fs::write(&sidecar, text).map_err(|e| Error::io(&sidecar, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    /// Inverse of [`Model::save`]. Returns the records that are not model
    /// parameters alongside the model.
    pub fn load(path: &Path) -> Result<(Self, CheckpointMeta, Vec<(String, Tensor)>)> {
        let sidecar = sidecar_path(path);
        let text = std::fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        let meta: CheckpointMeta =
            toml::from_str(&text).map_err(|e| Error::format(&sidecar, e.to_string()))?;
        meta.model.validate()?;
        let records = checkpoint::load(path)?;
        // Values are overwritten below; the seed only fixes the allocation order.
        let mut model = Model::new(meta.model.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
        let loaded = model
            .params
            .load_from(&records)
            .map_err(|e| Error::format(path, e.to_string()))?;
        if loaded != model.params.len() {
            return Err(Error::format(
                path,
                format!("holds {loaded} of {} model tensors", model.params.len()),
            ));
        }
        if let Some(name) = model.params.first_non_finite() {
            return Err(Error::format(path, format!("non-finite values in {name}")));
        }
        let extra = records
            .into_iter()
            .filter(|(name, _)| model.params.id(name).is_none())
            .collect();
        Ok((model, meta, extra))
    }
}

/// Architecture and provenance stored next to a parameter checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    #[serde(default)]
    pub iteration: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub config_hash: String,
    pub model: ModelConfig,
}

impl CheckpointMeta {
    pub fn new(model: ModelConfig) -> Self {
        Self {
            iteration: 0,
            seed: 0,
            config_hash: String::new(),
            model,
        }
    }
}

/// `model.rtlb` → `model.toml`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("toml")
}
