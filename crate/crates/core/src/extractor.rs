//! Shared convolutional stack over the crop pair, multi-resolution taps and
//! the fully connected projection.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{
    msra_init, BatchStats, Graph, ParamId, ParamKind, ParamStore, Tensor, Var, BN_EPS,
};
use crate::recurrent::{RecurrentModuleConfig, Scale, Variant};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvStage {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub channels: usize,
}

impl ConvStage {
    pub const fn new(kernel: usize, stride: usize, padding: usize, channels: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
            channels,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    /// Square crop side in pixels.
    pub input_size: usize,
    pub input_channels: usize,
    pub stages: Vec<ConvStage>,
    /// Stages (0-based) whose outputs are tapped as low-level features. The
    /// last stage is always included.
    pub taps: Vec<usize>,
    /// Every tapped map is average-pooled down to `pool_size × pool_size`.
    pub pool_size: usize,
    pub fc_width: usize,
    pub batchnorm: bool,
}

/// Desk conv stack: three stages with a low-level tap after the first.
const DESK_STAGES: [ConvStage; 3] = [
    ConvStage::new(5, 2, 2, 4),
    ConvStage::new(3, 2, 1, 8),
    ConvStage::new(3, 2, 1, 8),
];

/// AlexNet-shaped stack for 224-pixel RGB crops.
const FULL_STAGES: [ConvStage; 5] = [
    ConvStage::new(11, 4, 4, 96),
    ConvStage::new(5, 2, 2, 256),
    ConvStage::new(3, 2, 1, 384),
    ConvStage::new(3, 1, 1, 384),
    ConvStage::new(3, 2, 1, 256),
];

impl ExtractorConfig {
    pub fn stage_sizes(&self) -> Vec<usize> {
        let mut side = self.input_size;
        self.stages
            .iter()
            .map(|s| {
                side = (side + 2 * s.padding).saturating_sub(s.kernel) / s.stride.max(1) + 1;
                side
            })
            .collect()
    }

    /// Tapped stages in output order, with the final stage last.
    pub fn tapped_stages(&self) -> Vec<usize> {
        let last = self.stages.len().saturating_sub(1);
        let mut t: Vec<usize> = self.taps.iter().copied().filter(|&s| s != last).collect();
        t.push(last);
        t
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() || self.input_size == 0 || self.input_channels == 0 {
            return Err(Error::Config("extractor needs at least one stage".into()));
        }
        if self.fc_width == 0 || self.pool_size == 0 {
            return Err(Error::Config("extractor widths must be positive".into()));
        }
        let mut side = self.input_size;
        for (i, s) in self.stages.iter().enumerate() {
            if s.kernel == 0 || s.stride == 0 || s.channels == 0 || side + 2 * s.padding < s.kernel
            {
                return Err(Error::Config(format!(
                    "conv stage {} does not fit a {side}-px map",
                    i + 1
                )));
            }
            side = (side + 2 * s.padding - s.kernel) / s.stride + 1;
        }
        let sizes = self.stage_sizes();
        for &t in &self.taps {
            if t >= self.stages.len() {
                return Err(Error::Config(format!(
                    "tap after stage {} but only {} stages exist",
                    t + 1,
                    self.stages.len()
                )));
            }
        }
        for t in self.tapped_stages() {
            if sizes[t] % self.pool_size != 0 {
                return Err(Error::Config(format!(
                    "stage {} map of {} px cannot be pooled to {}",
                    t + 1,
                    sizes[t],
                    self.pool_size
                )));
            }
        }
        Ok(())
    }

    /// Feature width produced for one crop before the projection.
    pub fn per_crop_width(&self) -> usize {
        let p2 = self.pool_size * self.pool_size;
        self.tapped_stages()
            .iter()
            .map(|&t| self.stages[t].channels * p2)
            .sum()
    }

    pub fn fc_input_width(&self) -> usize {
        2 * self.per_crop_width()
    }

    /// Trainable parameters (running statistics excluded).
    pub fn param_count(&self) -> usize {
        let mut cin = self.input_channels;
        let mut n = 0;
        for s in &self.stages {
            n += s.channels * cin * s.kernel * s.kernel + s.channels;
            cin = s.channels;
        }
        n += self.fc_input_width() * self.fc_width + self.fc_width;
        if self.batchnorm {
            n += 2 * self.fc_width;
        }
        n
    }
}

/// Extractor sizing for a variant. The projection width always equals the
/// recurrent module's feature width; batch normalization is on for the
/// residual and dense variants.
pub fn config_for_variant(variant: Variant, scale: Scale) -> ExtractorConfig {
    let rnn = RecurrentModuleConfig::for_scale(variant, scale);
    let batchnorm = variant != Variant::Plain;
    match scale {
        Scale::Full => ExtractorConfig {
            input_size: 224,
            input_channels: 3,
            stages: FULL_STAGES.to_vec(),
            taps: vec![0, 1],
            pool_size: 7,
            fc_width: rnn.feature_width,
            batchnorm,
        },
        Scale::Desk => ExtractorConfig {
            input_size: 64,
            input_channels: 1,
            stages: DESK_STAGES.to_vec(),
            taps: vec![0],
            pool_size: 8,
            fc_width: rnn.feature_width,
            batchnorm,
        },
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Debug)]
struct ConvParams {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct NormParams {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

#[derive(Clone, Debug)]
pub struct Extractor {
    pub config: ExtractorConfig,
    convs: Vec<ConvParams>,
    fc_w: ParamId,
    fc_b: ParamId,
    norm: Option<NormParams>,
}

pub struct ExtractOutput {
    /// `[N × fc_width]` features handed to the recurrent module.
    pub features: Var,
    /// Projection output before batch normalization.
    pub pre_norm: Var,
    /// Batch statistics when normalization ran in train mode.
    pub stats: Option<BatchStats>,
}

pub const PARAM_PREFIX: &str = "ext.";

/// Initial normalization scale. Unit-variance features would dwarf the
/// recurrent outputs they are summed or concatenated with (|h| < 1, typically
/// a few tenths), so the normalized features start at a comparable scale.
pub const BN_GAMMA_INIT: f64 = 0.2;

impl Extractor {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: ExtractorConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let mut convs = Vec::with_capacity(config.stages.len());
        let mut cin = config.input_channels;
        for (i, s) in config.stages.iter().enumerate() {
            let fan_in = cin * s.kernel * s.kernel;
            let w = msra_init(&[s.channels, cin, s.kernel, s.kernel], fan_in, rng)?;
            convs.push(ConvParams {
                w: store.add_trainable(format!("ext.conv{}.w", i + 1), w)?,
                b: store
                    .add_trainable(format!("ext.conv{}.b", i + 1), Tensor::zeros(&[s.channels]))?,
            });
            cin = s.channels;
        }
        let fin = config.fc_input_width();
        let fc_w =
            store.add_trainable("ext.fc.w", msra_init(&[fin, config.fc_width], fin, rng)?)?;
        let fc_b = store.add_trainable("ext.fc.b", Tensor::zeros(&[config.fc_width]))?;
        let norm = if config.batchnorm {
            let f = config.fc_width;
            Some(NormParams {
                gamma: store.add_trainable("ext.bn.gamma", Tensor::full(&[f], BN_GAMMA_INIT))?,
                beta: store.add_trainable("ext.bn.beta", Tensor::zeros(&[f]))?,
                running_mean: store.add(
                    "ext.bn.running_mean",
                    Tensor::zeros(&[f]),
                    ParamKind::Buffer,
                )?,
                running_var: store.add(
                    "ext.bn.running_var",
                    Tensor::full(&[f], 1.0),
                    ParamKind::Buffer,
                )?,
            })
        } else {
            None
        };
        Ok(Self {
            config,
            convs,
            fc_w,
            fc_b,
            norm,
        })
    }

    pub fn output_width(&self) -> usize {
        self.config.fc_width
    }

    /// Expected shape of one side of the crop pair for `n` samples.
    pub fn crop_shape(&self, n: usize) -> [usize; 4] {
        let s = self.config.input_size;
        [n, self.config.input_channels, s, s]
    }

    /// Runs both crops through the shared stack. `prev` and `cur` are
    /// `[N × C × H × W]`; the result has one row per sample.
    pub fn extract(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        prev: &Tensor,
        cur: &Tensor,
        mode: Mode,
    ) -> Result<ExtractOutput> {
        let n = prev.shape().first().copied().unwrap_or(0);
        let want = self.crop_shape(n);
        if prev.shape() != want || cur.shape() != want {
            return Err(Error::Shape {
                op: "extract",
                lhs: prev.shape().to_vec(),
                rhs: cur.shape().to_vec(),
            });
        }
        let mut data = Vec::with_capacity(2 * prev.len());
        data.extend_from_slice(prev.data());
        data.extend_from_slice(cur.data());
        let mut stacked = want;
        stacked[0] = 2 * n;
        let x = g.constant(Tensor::new(stacked.to_vec(), data)?);

        let sizes = self.config.stage_sizes();
        let taps = self.config.tapped_stages();
        let mut pooled = Vec::with_capacity(taps.len());
        let mut h = x;
        for (i, (s, p)) in self.config.stages.iter().zip(&self.convs).enumerate() {
            let w = g.param(store, p.w);
            let b = g.param(store, p.b);
            let c = g.conv2d(h, w, b, s.stride, s.padding)?;
            h = g.relu(c);
            if taps.contains(&i) {
                let t = g.avg_pool(h, sizes[i] / self.config.pool_size)?;
                let width = s.channels * self.config.pool_size * self.config.pool_size;
                pooled.push(g.reshape(t, &[2 * n, width])?);
            }
        }
        let per_crop = g.concat(&pooled, 1)?;
        let a = g.slice(per_crop, 0, 0, n)?;
        let b = g.slice(per_crop, 0, n, n)?;
        let pair = g.concat(&[a, b], 1)?;

        let fw = g.param(store, self.fc_w);
        let fb = g.param(store, self.fc_b);
        let z = g.matmul(pair, fw)?;
        let z = g.add_bias(z, fb)?;
        if !g.value(z).all_finite() {
            return Err(Error::NonFinite("extractor activations".into()));
        }
        // Normalization sits between the projection and its ReLU, so it
        // sees dense pre-activations rather than sparse rectified ones.
        let pre_norm = z;
        let (normed, stats) = match (&self.norm, mode) {
            (None, _) => (z, None),
            (Some(np), Mode::Train) => {
                let gm = g.param(store, np.gamma);
                let bt = g.param(store, np.beta);
                let (y, st) = g.batchnorm_train(pre_norm, gm, bt, BN_EPS)?;
                (y, Some(st))
            }
            (Some(np), Mode::Infer) => {
                let gm = g.param(store, np.gamma);
                let bt = g.param(store, np.beta);
                let rm = store.value(np.running_mean).data().to_vec();
                let rv = store.value(np.running_var).data().to_vec();
                (g.batchnorm_infer(pre_norm, gm, bt, &rm, &rv, BN_EPS)?, None)
            }
        };
        let features = g.relu(normed);
        Ok(ExtractOutput {
            features,
            pre_norm,
            stats,
        })
    }

    /// Folds train-mode batch statistics into the running estimates:
    /// `running = momentum·running + (1 − momentum)·batch`.
    pub fn update_running_stats(&self, store: &mut ParamStore, stats: &BatchStats, momentum: f64) {
        let Some(np) = &self.norm else { return };
        for (id, batch) in [(np.running_mean, &stats.mean), (np.running_var, &stats.var)] {
            for (r, b) in store.value_mut(id).data_mut().iter_mut().zip(batch) {
                *r = momentum * *r + (1.0 - momentum) * b;
            }
        }
    }

    pub fn has_batchnorm(&self) -> bool {
        self.norm.is_some()
    }
}
