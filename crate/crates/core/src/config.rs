//! The single JSON document describing a run.
//!
//! Every key is optional; missing keys take the defaults below and the fully
//! resolved document is written next to the run's outputs. Unknown keys are
//! rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ddpo::TrainerConfig;
use crate::denoiser::NetShape;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::pretrain::{MixtureSpec, PretrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        // [1e-4, 0.02] rescaled by 1000 / T for T = 50
        Self {
            steps: 50,
            beta_min: 2e-3,
            beta_max: 0.4,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_min, self.beta_max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_width: usize,
    pub embed_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_width: 64,
            embed_dim: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds the dataset, initialization and pretraining streams.
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Samples drawn when measuring a model's class ratio.
    pub eval_samples: usize,
    pub mixture: MixtureSpec,
    pub schedule: ScheduleConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub trainer: TrainerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            eval_samples: 1000,
            mixture: MixtureSpec::default(),
            schedule: ScheduleConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            trainer: TrainerConfig::default(),
        }
    }
}

fn scoped<T>(section: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{section}.{m}")),
        other => other,
    })
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        // serde_json's message already ends with "at line L column C"
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        scoped("mixture", self.mixture.validate())?;
        scoped("schedule", self.schedule.build().map(|_| ()))?;
        scoped("pretrain", self.pretrain.validate())?;
        scoped("trainer", self.trainer.validate())?;
        scoped("model", self.net_shape().map(|_| ()))?;
        if self.eval_samples == 0 {
            return Err(Error::Config("eval_samples: must be positive".into()));
        }
        Ok(())
    }

    pub fn net_shape(&self) -> Result<NetShape> {
        NetShape::new(self.mixture.dim(), self.model.hidden_width, self.model.embed_dim)
    }
}
