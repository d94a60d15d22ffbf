//! TOML run configuration.
//!
//! ```toml
//! preset = "T"        # T, B or T-mini
//! scale = 4
//! seed = 0
//! self_ensemble = false
//! threads = 0         # 0 = rayon default
//!
//! [model]             # optional overrides merged onto the preset
//! channels = 24
//! [model.sgme]
//! k = 2
//!
//! [train]
//! steps = 200
//! lr = 2e-3
//! lambda_freq = 0.05
//! crop = 64
//! ```
//!
//! Unknown keys anywhere are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::DEFAULT_LAMBDA_FREQ;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub steps: usize,
    pub lr: f64,
    pub lambda_freq: f64,
    /// HR patch size for augmentation.
    pub crop: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            steps: 200,
            lr: 2e-3,
            lambda_freq: DEFAULT_LAMBDA_FREQ,
            crop: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub preset: String,
    pub scale: usize,
    pub seed: u64,
    pub self_ensemble: bool,
    pub threads: usize,
    /// Partial [`ModelConfig`] applied on top of the preset.
    pub model: Option<toml::Table>,
    pub train: TrainSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            preset: "T".into(),
            scale: 4,
            seed: 0,
            self_ensemble: false,
            threads: 0,
            model: None,
            train: TrainSettings::default(),
        }
    }
}

fn merge(base: &mut toml::Table, over: &toml::Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.model_config()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// The preset at `scale` with the `[model]` overrides applied. An
    /// `upscale` override must agree with `scale`.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let base = ModelConfig::preset(&self.preset, self.scale)?;
        let Some(over) = &self.model else {
            return Ok(base);
        };
        let mut table = toml::Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut table, over);
        let cfg: ModelConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(format!("[model]: {e}")))?;
        if cfg.upscale != self.scale {
            return Err(Error::Config(format!("model.upscale {} disagrees with scale {}", cfg.upscale, self.scale)));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
