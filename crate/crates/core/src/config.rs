//! Run configuration: architecture, curriculum, data and output paths in
//! one TOML file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::hex_digest;
use crate::model::ModelConfig;
use crate::recurrent::{DenseOutput, Scale, Variant};
use crate::synth::{generate_suite, import_suite, Sequence, SuiteParams};
use crate::trainer::TrainConfig;

/// Optional departures from the variant's default architecture.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelOverrides {
    /// Extractor output width, which is also the recurrent input width.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_width: Option<usize>,
    /// LSTM width (growth width for the dense variant).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dense_output: Option<DenseOutput>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batchnorm: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Seed of the generated training set.
    pub seed: u64,
    pub count: usize,
    pub length: usize,
    pub frame_size: usize,
    /// Train on an exported suite instead of generating one. Relative
    /// paths resolve against the data root.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        let p = SuiteParams::training();
        Self {
            seed: 1,
            count: p.count,
            length: p.length,
            frame_size: p.width,
            dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub variant: Variant,
    pub scale: Scale,
    /// Checkpoints and logs go here.
    pub out_dir: PathBuf,
    #[serde(default)]
    pub model: ModelOverrides,
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
}

impl RunConfig {
    pub fn preset(variant: Variant, scale: Scale) -> Self {
        Self {
            variant,
            scale,
            out_dir: PathBuf::from(format!("runs/{scale}-{variant}")),
            model: ModelOverrides::default(),
            train: TrainConfig::for_variant(variant, scale),
            data: DataConfig::default(),
        }
    }

    /// Architecture after overrides, with every width constraint checked.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut m = ModelConfig::for_variant(self.variant, self.scale);
        let o = &self.model;
        if let Some(w) = o.feature_width {
            m.extractor.fc_width = w;
            m.rnn.feature_width = w;
        }
        if let Some(h) = o.hidden {
            m.rnn.hidden = h;
        }
        if let Some(d) = o.dense_output {
            m.rnn.dense_output = d;
        }
        if let Some(b) = o.batchnorm {
            m.extractor.batchnorm = b;
        }
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config()?;
        self.train.validate()?;
        let d = &self.data;
        if d.dir.is_none() && (d.count == 0 || d.frame_size < 32) {
            return Err(Error::Config(
                "generated training set needs frames of at least 32 pixels".into(),
            ));
        }
        if d.dir.is_none() && d.length <= self.train.curriculum.initial_unrolls {
            return Err(Error::Config(format!(
                "training sequences of {} frames cannot hold {} unrolls",
                d.length, self.train.curriculum.initial_unrolls
            )));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configs always serialize")
    }

    /// Content hash of the configuration.
    pub fn hash(&self) -> String {
        hex_digest(self.to_toml().as_bytes())
    }

    /// Output directory, resolved against `base` when relative.
    pub fn out_dir_in(&self, base: &Path) -> PathBuf {
        base.join(&self.out_dir)
    }

    /// Generates the training set, or imports it from `data.dir`.
    pub fn training_set(&self, data_root: &Path) -> Result<Vec<Sequence>> {
        match &self.data.dir {
            Some(dir) => import_suite(&data_root.join(dir)),
            None => generate_suite(
                &SuiteParams {
                    count: self.data.count,
                    width: self.data.frame_size,
                    height: self.data.frame_size,
                    length: self.data.length,
                },
                self.data.seed,
            ),
        }
    }
}
