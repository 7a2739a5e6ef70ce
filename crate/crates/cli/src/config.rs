//! Flat run configuration shared by `train`, `eval` and `predict`.
//!
//! A config file is one JSON object whose keys are the fields of
//! [`RunConfig`]; missing keys take defaults and unknown keys are rejected.
//! Command-line flags override file values.

use std::fs;
use std::path::{Path, PathBuf};

use bi_clstm::model::{FeatureMode, ModelConfig};
use bi_clstm::train::{OptimizerKind, TrainConfig};
use bi_clstm::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub report: Option<PathBuf>,

    pub patch_size: usize,
    pub hidden_channels: usize,
    pub kernel_size: usize,
    pub dropout: f64,
    pub band_group: usize,
    pub feature_mode: FeatureMode,
    pub bidirectional: bool,

    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub clip_norm: f64,
    pub augment: bool,
    pub seed: u64,
    pub forget_bias: f64,

    /// Fraction of each class used for training.
    pub train_fraction: f64,
    /// Seed of the train/test split; defaults to `seed`.
    pub split_seed: Option<u64>,
    /// Independent runs with seeds `seed, seed + 1, ...`.
    pub repeats: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::new(1, 2);
        let t = TrainConfig::default();
        RunConfig {
            data: None,
            checkpoint: None,
            report: None,
            patch_size: m.patch_size,
            hidden_channels: m.hidden_channels,
            kernel_size: m.kernel_size,
            dropout: m.dropout,
            band_group: m.band_group,
            feature_mode: m.feature_mode,
            bidirectional: m.bidirectional,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            epochs: t.epochs,
            optimizer: t.optimizer,
            momentum: t.momentum,
            beta1: t.beta1,
            beta2: t.beta2,
            epsilon: t.epsilon,
            clip_norm: t.clip_norm,
            augment: t.augment,
            seed: t.seed,
            forget_bias: t.forget_bias,
            train_fraction: 0.1,
            split_seed: None,
            repeats: 1,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Argument(format!("config file {}: {e}", path.display())))
    }

    pub fn model_config(&self, bands: usize, classes: usize) -> Result<ModelConfig> {
        let config = ModelConfig {
            patch_size: self.patch_size,
            bands,
            hidden_channels: self.hidden_channels,
            kernel_size: self.kernel_size,
            dropout: self.dropout,
            band_group: self.band_group,
            feature_mode: self.feature_mode,
            bidirectional: self.bidirectional,
            classes,
        };
        config.validate()?;
        Ok(config)
    }

    /// Training settings for repeat `run`.
    pub fn train_config(&self, run: usize) -> Result<TrainConfig> {
        let config = TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            optimizer: self.optimizer,
            momentum: self.momentum,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            clip_norm: self.clip_norm,
            augment: self.augment,
            seed: self.seed.wrapping_add(run as u64),
            forget_bias: self.forget_bias,
            threads: None,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn split_seed_for(&self, run: usize) -> u64 {
        self.split_seed.unwrap_or(self.seed).wrapping_add(run as u64)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Argument(format!(
                "train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        if self.repeats == 0 {
            return Err(Error::Argument("repeats must be at least 1".into()));
        }
        self.train_config(0)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_mirror_library() {
        let c = RunConfig::default();
        assert_eq!(c.model_config(10, 3).unwrap(), ModelConfig::new(10, 3));
        assert_eq!(c.train_config(0).unwrap(), TrainConfig::default());
        assert_eq!(c.train_config(2).unwrap().seed, 2);
        assert_eq!(c.split_seed_for(1), 1);
    }

    #[test]
    fn partial_file_and_unknown_keys() {
        let c: RunConfig = serde_json::from_str(r#"{"epochs": 3, "feature_mode": "last_state"}"#).unwrap();
        assert_eq!((c.epochs, c.feature_mode), (3, FeatureMode::LastState));
        assert_eq!(c.batch_size, 16);
        assert!(serde_json::from_str::<RunConfig>(r#"{"epoch": 3}"#).is_err());
    }

    #[test]
    fn invalid_values_are_argument_errors() {
        let c = RunConfig {
            train_fraction: 1.5,
            ..RunConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Argument(_))));
        let c = RunConfig {
            batch_size: 0,
            ..RunConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Argument(_))));
        let c = RunConfig {
            patch_size: 6,
            ..RunConfig::default()
        };
        assert!(c.model_config(4, 2).is_err());
    }
}
