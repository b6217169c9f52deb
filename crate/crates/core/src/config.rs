//! Run configuration: one JSON document with a section per subsystem. Every
//! field has a default; unknown keys are rejected. The canonical
//! serialization's SHA-256 ties checkpoints to the config that produced them.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::finetune::FinetuneConfig;
use crate::handmodel::{synth_asset, AssetError, HandModelAsset};
use crate::model::ModelConfig;
use crate::numerics::AdamParams;
use crate::pretrain::PretrainConfig;
use crate::synth::SynthConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("config invalid: {0}")]
    Invalid(String),
    #[error("asset: {0}")]
    Asset(#[from] AssetError),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum AssetSource {
    Synth,
    File,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AssetConfig {
    pub source: AssetSource,
    /// seed for the procedural asset (source = synth)
    pub seed: u64,
    /// path to an HMA1 asset file (source = file)
    pub path: Option<PathBuf>,
}

impl Default for AssetConfig {
    fn default() -> Self {
        AssetConfig {
            source: AssetSource::Synth,
            seed: 7,
            path: None,
        }
    }
}

impl AssetConfig {
    pub fn load(&self) -> Result<HandModelAsset, ConfigError> {
        match self.source {
            AssetSource::Synth => Ok(synth_asset(self.seed)),
            AssetSource::File => {
                let path = self.path.as_ref().ok_or_else(|| {
                    ConfigError::Invalid("asset.source = file requires asset.path".into())
                })?;
                Ok(HandModelAsset::load(path)?)
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// score the masked input against itself instead of running the model
    /// (diagnostic baseline: output metrics must equal input metrics)
    pub identity_baseline: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub asset: AssetConfig,
    pub optimizer: AdamParams,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 42,
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            asset: AssetConfig::default(),
            optimizer: AdamParams::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl Config {
    pub fn from_json(json: &str) -> Result<Self, ConfigError> {
        let cfg: Config = serde_json::from_str(json)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.synth.validate().map_err(ConfigError::Invalid)?;
        self.model.validate().map_err(ConfigError::Invalid)?;
        self.pretrain.validate().map_err(ConfigError::Invalid)?;
        self.finetune.validate().map_err(ConfigError::Invalid)?;
        if self.optimizer.base_learning_rate <= 0.0 {
            return Err(ConfigError::Invalid(
                "optimizer.base_learning_rate must be positive".into(),
            ));
        }
        if let AssetSource::File = self.asset.source {
            if self.asset.path.is_none() {
                return Err(ConfigError::Invalid(
                    "asset.source = file requires asset.path".into(),
                ));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_and_validates() {
        let cfg = Config::default();
        let json = serde_json::to_string_pretty(&cfg).unwrap();
        let back = Config::from_json(&json).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
    }

    #[test]
    fn empty_document_uses_defaults() {
        let cfg = Config::from_json("{}").unwrap();
        assert_eq!(cfg, Config::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(Config::from_json(r#"{"quantum_flux": 3}"#).is_err());
        assert!(Config::from_json(r#"{"pretrain": {"made_up": 1}}"#).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(Config::from_json(r#"{"pretrain": {"choose_rate": 0.0}}"#).is_err());
        assert!(Config::from_json(r#"{"model": {"embed_dim": 30, "encoder_heads": 4}}"#).is_err());
        assert!(Config::from_json(r#"{"synth": {"dropout_rate": 2.0}}"#).is_err());
        assert!(Config::from_json(r#"{"asset": {"source": "file"}}"#).is_err());
    }

    #[test]
    fn hash_changes_with_any_field() {
        let a = Config::default();
        let mut b = Config::default();
        b.pretrain.lambda = 0.02;
        assert_ne!(a.hash(), b.hash());
    }
}
