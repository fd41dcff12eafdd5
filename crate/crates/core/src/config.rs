//! Experiment configuration: one TOML file describing the whole pipeline,
//! deserialized into the per-module config structs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::losses::LossConfig;
use crate::models::ModelConfig;
use crate::synth::SceneConfig;
use crate::trainer::TrainConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    /// Frames per block (k).
    pub block_size: usize,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            block_size: 47,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchConfig {
    pub i_size: usize,
    pub t_size: usize,
    pub step: usize,
    pub freq: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        PatchConfig {
            i_size: 256,
            t_size: 128,
            step: 1,
            freq: 20,
        }
    }
}

/// Top-level experiment file; every section falls back to its defaults when
/// omitted.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub scene: SceneConfig,
    pub split: SplitConfig,
    pub patch: PatchConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serialization")
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        if self.split.block_size == 0 {
            return Err(Error::Config("split.block_size must be > 0".into()));
        }
        if self.patch.t_size >= self.patch.i_size {
            return Err(Error::Config("patch.t_size must be < patch.i_size".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelKind;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml_string();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_file_uses_defaults() {
        let cfg = ExperimentConfig::from_toml_str(
            r#"
[model]
kind = "convlstm"
spatial = 64
base_width = 0.125

[train]
max_steps = 50
"#,
        )
        .unwrap();
        assert_eq!(cfg.model.kind, ModelKind::ConvLstm);
        assert_eq!(cfg.model.spatial, 64);
        assert_eq!(cfg.train.max_steps, 50);
        // untouched sections keep their defaults
        assert_eq!(cfg.split.block_size, 47);
        assert_eq!(cfg.loss.alpha, 0.84);
        assert_eq!(cfg.train.learning_rate, 2e-4);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(ExperimentConfig::from_toml_str("[loss]\nalpha = 2.0\n").is_err());
        assert!(ExperimentConfig::from_toml_str("[train]\nbatch_size = 0\n").is_err());
        assert!(ExperimentConfig::from_toml_str("[patch]\ni_size = 8\nt_size = 8\n").is_err());
        assert!(ExperimentConfig::from_toml_str("not toml at all [").is_err());
    }
}
