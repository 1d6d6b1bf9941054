//! Experiment configuration.
//!
//! One TOML file with sections mirroring the module names. Parsing is strict:
//! unknown keys are rejected with their path. Every default is materialized
//! into the resolved config before fingerprinting, so the fingerprint changes
//! whenever any effective setting changes, never because a default was left
//! implicit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Activation, Arch};
use crate::records::config_fingerprint;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// "synthetic" or "cifar10".
    pub kind: String,
    /// Directory containing the CIFAR-10 binary batches (cifar10 only).
    pub path: String,
    pub num_classes: usize,
    pub train_samples_per_class: usize,
    pub test_samples_per_class: usize,
    pub resolution: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            kind: "synthetic".into(),
            path: String::new(),
            num_classes: 2,
            train_samples_per_class: 48,
            test_samples_per_class: 32,
            resolution: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub arch: Arch,
    pub activation: Activation,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { arch: Arch::TinyCnn, activation: Activation::Relu }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epsilons: Vec<u32>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub inner_steps: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epsilons: vec![0, 2, 4, 8],
            epochs: 15,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 2e-4,
            lr_decay_epochs: vec![10, 13],
            lr_decay_factor: 0.1,
            inner_steps: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    pub deltas: Vec<u32>,
    pub steps: usize,
    /// Step size override; empty means the (delta/8)(2/255) rule.
    pub alpha: Option<f64>,
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection { deltas: vec![0, 1, 2, 4, 8], steps: 20, alpha: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantSection {
    pub betas: Vec<f64>,
    /// Tap points to sweep; "none" (no defense) is always included as the
    /// baseline row.
    pub taps: Vec<String>,
    /// Which trained model (by its training epsilon) hosts the defense.
    pub model_epsilon: u32,
    /// Attack strengths for the sweep.
    pub deltas: Vec<u32>,
}

impl Default for QuantSection {
    fn default() -> Self {
        QuantSection {
            betas: vec![4.0, 6.0, 8.0, 10.0, 12.0],
            taps: vec!["conv0".into(), "block1".into(), "block2".into()],
            model_epsilon: 4,
            deltas: vec![0, 2, 4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorruptionSection {
    pub kinds: Vec<String>,
    pub severities: Vec<u32>,
}

impl Default for CorruptionSection {
    fn default() -> Self {
        CorruptionSection {
            kinds: vec![
                "gaussian_noise".into(),
                "impulse_noise".into(),
                "brightness".into(),
                "contrast".into(),
                "pixelate".into(),
            ],
            severities: vec![1, 2, 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    pub jobs: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { seed: 1, jobs: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub attack: AttackSection,
    pub quant: QuantSection,
    pub corruption: CorruptionSection,
    pub run: RunSection,
}

impl Config {
    pub fn parse(text: &str) -> Result<Config> {
        let cfg: Config =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config> {
        Config::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        match self.dataset.kind.as_str() {
            "synthetic" => {
                if self.dataset.num_classes < 2 {
                    return Err(Error::Config("dataset.num_classes must be at least 2".into()));
                }
            }
            "cifar10" => {
                if self.dataset.path.is_empty() {
                    return Err(Error::Config("dataset.path is required for cifar10".into()));
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "dataset.kind must be \"synthetic\" or \"cifar10\", got \"{other}\""
                )))
            }
        }
        if self.train.epsilons.is_empty() || !self.train.epsilons.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config(
                "train.epsilons must be non-empty and strictly increasing".into(),
            ));
        }
        if self.attack.steps == 0 || self.train.inner_steps == 0 {
            return Err(Error::Config("attack steps must be positive".into()));
        }
        if self.quant.betas.iter().any(|&b| b <= 0.0) {
            return Err(Error::Config("quant.betas must be positive".into()));
        }
        if self.corruption.severities.iter().any(|&s| s > 5) {
            return Err(Error::Config("corruption.severities must be 0..=5".into()));
        }
        if !self.train.epsilons.contains(&self.quant.model_epsilon) {
            return Err(Error::Config(format!(
                "quant.model_epsilon {} is not one of train.epsilons",
                self.quant.model_epsilon
            )));
        }
        if self.run.jobs == 0 {
            return Err(Error::Config("run.jobs must be positive".into()));
        }
        Ok(())
    }

    /// Canonical serialization of the fully materialized config.
    pub fn resolved(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 hex fingerprint of the resolved config.
    pub fn fingerprint(&self) -> String {
        config_fingerprint(&self.resolved())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_materializes_all_defaults() {
        let cfg = Config::parse("").unwrap();
        assert_eq!(cfg, Config::default());
        let resolved = cfg.resolved();
        // Every default must be explicit in the resolved text.
        for key in ["epsilons", "batch_size", "weight_decay", "betas", "severities", "seed"] {
            assert!(resolved.contains(key), "missing {key} in resolved config");
        }
    }

    #[test]
    fn unknown_key_rejected_with_path() {
        let err = Config::parse("[train]\nepochz = 3\n").unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("epochz"), "{msg}");
    }

    #[test]
    fn fingerprint_tracks_every_field() {
        let base = Config::default().fingerprint();
        let mut cfg = Config::default();
        cfg.train.lr = 0.01;
        assert_ne!(base, cfg.fingerprint());
        let mut cfg2 = Config::default();
        cfg2.corruption.severities = vec![1];
        assert_ne!(base, cfg2.fingerprint());
        // Explicitly writing the default value gives the same fingerprint.
        let explicit = Config::parse("[train]\nlr = 0.05\n").unwrap();
        assert_eq!(base, explicit.fingerprint());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(Config::parse("[train]\nepsilons = [4, 2]\n").is_err());
        assert!(Config::parse("[dataset]\nkind = \"imagenet\"\n").is_err());
        assert!(Config::parse("[quant]\nmodel_epsilon = 3\n").is_err());
        assert!(Config::parse("[corruption]\nseverities = [9]\n").is_err());
    }

    #[test]
    fn round_trips_through_resolved_text() {
        let cfg = Config::default();
        let back = Config::parse(&cfg.resolved()).unwrap();
        assert_eq!(cfg, back);
    }
}
