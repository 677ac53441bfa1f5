//! Run configuration shared by every command.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataworld::{SamplingConfig, WorldConfig};
use crate::dynamics::StepConfig;
use crate::model::{ArchConfig, FeatureSource, Method, Variant};
use crate::training::{LossConfig, TrainConfig, TrainRun};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MethodSection {
    pub name: Method,
    pub features: FeatureSource,
    pub variant: Variant,
    pub arch: ArchConfig,
}

impl Default for MethodSection {
    fn default() -> Self {
        Self {
            name: Method::Idbf,
            features: FeatureSource::Camera,
            variant: Variant::Fused,
            arch: ArchConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Half-width of the control box used by the runtime filter (m/s).
    pub u_max: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { u_max: 10.0 }
    }
}

/// Every section is optional except the top-level `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub world: WorldConfig,
    #[serde(default)]
    pub data: SamplingConfig,
    #[serde(default)]
    pub method: MethodSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub step: StepConfig,
    #[serde(default)]
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.world.validate().map_err(|e| invalid(&e))?;
        self.step.validate().map_err(|e| invalid(&e))?;
        self.loss.validate().map_err(|e| invalid(&e))?;
        if self.train.batch_size == 0 {
            return Err(ConfigError::Invalid("batch_size must be positive".into()));
        }
        if !(self.train.learning_rate > 0.0 && self.train.learning_rate.is_finite()) {
            return Err(ConfigError::Invalid("learning_rate must be positive".into()));
        }
        if !(self.eval.u_max > 0.0) {
            return Err(ConfigError::Invalid("eval.u_max must be positive".into()));
        }
        if self.method.arch.state_dim == 0 {
            return Err(ConfigError::Invalid("state_dim must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn train_run(&self) -> TrainRun {
        TrainRun {
            method: self.method.name,
            features: self.method.features,
            variant: self.method.variant,
            seed: self.seed,
            train: self.train.clone(),
            loss: self.loss.clone(),
            step: self.step,
            arch: self.method.arch.clone(),
            sampling: self.data.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_is_mandatory() {
        assert!(matches!(RunConfig::parse("[world]\nsteps = 40\n"), Err(ConfigError::Parse(_))));
        let cfg = RunConfig::parse("seed = 3\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.world, WorldConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::parse("seed = 1\nbogus = 2\n").is_err());
        assert!(RunConfig::parse("seed = 1\n[loss]\nw_safe = 1.0\nw_extra = 2.0\n").is_err());
    }

    #[test]
    fn sections_parse() {
        let text = "seed = 5\n[method]\nname = \"dh\"\nfeatures = \"gt\"\n[method.arch]\nstate_dim = 8\n[train]\njoint_epochs = 3\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.method.name, Method::Dh);
        assert_eq!(cfg.method.features, FeatureSource::Gt);
        assert_eq!(cfg.method.arch.state_dim, 8);
        assert_eq!(cfg.train.joint_epochs, 3);
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::parse("seed = 1\n").unwrap();
        let b = RunConfig::parse("seed = 2\n").unwrap();
        assert_eq!(a.hash(), RunConfig::parse("seed = 1\n").unwrap().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(matches!(RunConfig::parse("seed = 1\n[loss]\nalpha = 0.0\n"), Err(ConfigError::Invalid(_))));
    }
}
