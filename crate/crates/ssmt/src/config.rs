//! Run configuration: one JSON document wiring model dims, data paths,
//! phase budgets, loss weights, and ablation flags together. Unknown keys
//! are rejected and every constraint is checked at load time, before any
//! training starts.

use crate::data::augment::AugmentationConfig;
use crate::data::phantom::PhantomConfig;
use crate::error::{Result, SsmtError};
use crate::model::ModelConfig;
use crate::train::losses::{AblationFlags, LossWeights};
use crate::train::phases::{Phase, PhaseConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Dataset root holding `image/` plus optional mask directories.
    pub root: Option<PathBuf>,
    /// Where checkpoints and metrics land.
    pub out_dir: PathBuf,
    pub phantom: PhantomConfig,
    pub augment: AugmentationConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            root: None,
            out_dir: PathBuf::from("runs"),
            phantom: PhantomConfig::default(),
            augment: AugmentationConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// The run's single seed; every RNG stream derives from it.
    pub seed: u64,
    pub weights: LossWeights,
    pub pretrain: PhaseConfig,
    pub supervised: PhaseConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            seed: 42,
            weights: LossWeights::default(),
            pretrain: PhaseConfig {
                phase: Phase::Pretrain,
                ..PhaseConfig::default()
            },
            supervised: PhaseConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataSection,
    pub train: TrainSection,
    pub ablation: AblationFlags,
}

impl RunConfig {
    /// Parse and validate a JSON config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SsmtError::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| SsmtError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.phantom.validate()?;
        self.data.augment.validate()?;
        self.train.weights.validate()?;
        self.train.pretrain.validate()?;
        self.train.supervised.validate()?;
        if self.train.pretrain.phase != Phase::Pretrain {
            return Err(SsmtError::Config(
                "train.pretrain.phase must be \"pretrain\"".to_string(),
            ));
        }
        if self.train.supervised.phase != Phase::Supervised {
            return Err(SsmtError::Config(
                "train.supervised.phase must be \"supervised\"".to_string(),
            ));
        }
        Ok(())
    }

    /// Apply an optional seed override and push the single run seed into
    /// both phase configs.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.train.seed = s;
        }
        self.train.pretrain.seed = self.train.seed;
        self.train.supervised.seed = self.train.seed;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_and_validates() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let json = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.train.seed, 42);
        assert_eq!(cfg.train.weights, LossWeights::default());
    }

    #[test]
    fn unknown_keys_are_rejected_in_every_section() {
        for json in [
            r#"{"bogus": 1}"#,
            r#"{"model": {"bogus": 1}}"#,
            r#"{"data": {"bogus": 1}}"#,
            r#"{"data": {"phantom": {"bogus": 1}}}"#,
            r#"{"data": {"augment": {"bogus": 1}}}"#,
            r#"{"train": {"bogus": 1}}"#,
            r#"{"train": {"weights": {"bogus": 1}}}"#,
            r#"{"train": {"pretrain": {"bogus": 1}}}"#,
            r#"{"ablation": {"bogus": 1}}"#,
        ] {
            assert!(
                serde_json::from_str::<RunConfig>(json).is_err(),
                "accepted {json}"
            );
        }
    }

    #[test]
    fn bad_weights_fail_at_load_time() {
        let dir = std::env::temp_dir().join(format!("ssmt_cfg_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.json");
        std::fs::write(
            &path,
            r#"{"train": {"weights": {"alpha": 0.4, "beta": 0.3, "gamma": 0.2, "eta": 0.1}}}"#,
        )
        .unwrap();
        let err = RunConfig::load(&path).unwrap_err();
        assert!(matches!(err, SsmtError::Config(_)), "{err}");
        assert!(err.to_string().contains("nodule weight"), "{err}");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn seed_override_reaches_both_phases() {
        let cfg = RunConfig::default().with_seed(Some(7));
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.train.pretrain.seed, 7);
        assert_eq!(cfg.train.supervised.seed, 7);
        let cfg = RunConfig::default().with_seed(None);
        assert_eq!(cfg.train.pretrain.seed, 42);
    }

    #[test]
    fn wrong_phase_tags_are_rejected() {
        let json = r#"{"train": {"pretrain": {"phase": "supervised"}}}"#;
        let cfg: RunConfig = serde_json::from_str(json).unwrap();
        assert!(cfg.validate().is_err());
    }
}
