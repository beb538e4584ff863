//! Experiment configuration files (strict JSON).

use std::fs;
use std::path::{Path, PathBuf};

use lrlm_core::costmodel::HardwareProfile;
use lrlm_core::distsim::BACKWARD_FACTOR;
use lrlm_core::presets::preset;
use lrlm_core::trainer::TrainConfig;
use lrlm_core::{LayerSpecs, ModelConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSection {
    pub stages: usize,
    pub micro_batches: usize,
    #[serde(default = "one")]
    pub forward_cost: f64,
    #[serde(default = "default_backward")]
    pub backward_cost: f64,
}

fn one() -> f64 {
    1.0
}

fn default_backward() -> f64 {
    BACKWARD_FACTOR
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShardSection {
    pub gpus: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederatedSection {
    pub nodes: u64,
    #[serde(default = "one_u64")]
    pub iterations: u64,
}

fn one_u64() -> u64 {
    1
}

/// One experiment. The model comes from `preset` or an explicit `model`
/// section, not both. Relative paths resolve against the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub layers: Option<LayerSpecs>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub hardware: Option<HardwareProfile>,
    #[serde(default)]
    pub pipeline: Option<PipelineSection>,
    #[serde(default)]
    pub shard: Option<ShardSection>,
    #[serde(default)]
    pub federated: Option<FederatedSection>,
    /// Training text, read as bytes.
    #[serde(default)]
    pub corpus: Option<PathBuf>,
    /// Starting checkpoint.
    #[serde(default)]
    pub init: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg: Self =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let dir = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.corpus, &mut cfg.init].into_iter().flatten() {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.preset.is_some() && self.model.is_some() {
            return Err(CliError::Config("give either `preset` or `model`, not both".into()));
        }
        if let Some(m) = self.model_config()? {
            m.validate()?;
            if let Some(l) = &self.layers {
                l.validate(&m)?;
            }
        }
        if let Some(t) = &self.train {
            t.validate()?;
        }
        if let Some(h) = &self.hardware {
            h.validate()?;
        }
        for p in [&self.corpus, &self.init].into_iter().flatten() {
            if !p.is_file() {
                return Err(CliError::Config(format!("referenced file {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    /// The model shape, if the config names one.
    pub fn model_config(&self) -> Result<Option<ModelConfig>> {
        match (&self.preset, &self.model) {
            (Some(name), _) => Ok(Some(preset(name)?.config)),
            (None, Some(m)) => Ok(Some(m.clone())),
            (None, None) => Ok(None),
        }
    }
}
