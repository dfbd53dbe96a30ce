//! Run configuration as TOML: a `[network]` table (with `[network.nlg]`)
//! and a `[train]` table. Every key is optional and defaults as below.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::NetworkConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Noise standard deviation on the 8-bit scale.
    pub sigma: f64,
    pub epochs: usize,
    /// Patches drawn per epoch; 0 uses every patch.
    pub patches_per_epoch: usize,
    pub batch_size: usize,
    pub patch_size: usize,
    pub patch_stride: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub lr_decay_every_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every_steps: usize,
    /// Stop after this many steps; 0 runs every epoch.
    pub max_steps: usize,
    /// Hold graphs fixed while checking gradients numerically.
    pub fixed_graph_in_gradcheck: bool,
    /// Log elapsed seconds in the metrics file; off gives byte-identical logs.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            sigma: 25.0,
            epochs: 30,
            patches_per_epoch: 0,
            batch_size: 32,
            patch_size: 32,
            patch_stride: 16,
            learning_rate: 1e-3,
            lr_decay: 0.5,
            lr_decay_every_epochs: 10,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            checkpoint_every_steps: 0,
            max_steps: 0,
            fixed_graph_in_gradcheck: true,
            record_wall_time: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("patch_size", self.patch_size),
            ("patch_stride", self.patch_stride),
            ("lr_decay_every_epochs", self.lr_decay_every_epochs),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("train.{name} must be positive")));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("train.sigma {} must be non-negative", self.sigma)));
        }
        if !(self.learning_rate > 0.0 && self.lr_decay > 0.0 && self.adam_eps > 0.0) {
            return Err(Error::Config("learning rate, decay and adam_eps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Step size during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi((epoch / self.lr_decay_every_epochs) as i32)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Canonical text form; parsing it gives back an equal config.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()
    }
}
