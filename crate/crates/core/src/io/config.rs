use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detect::CalibrationConfig;
use crate::diagnosis::EndpointConfig;
use crate::error::Result;
use crate::model::ModelConfig;
use crate::saliency::SaliencyConfig;
use crate::synth::{BenchConfig, FaultSuite, WorldConfig};
use crate::train::TrainConfig;

/// Everything a pipeline run needs. Every field has a default, so `{}` is a
/// valid config; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Nominal episodes generated for training.
    pub train_episodes: usize,
    /// Index and length of the held-aside nominal calibration episode.
    pub calibration_episode: usize,
    pub calibration_len: usize,
    pub calibration: CalibrationConfig,
    pub bench: BenchConfig,
    pub suite: FaultSuite,
    pub saliency: SaliencyConfig,
    pub endpoint: EndpointConfig,
}

impl Default for RunConfig {
    /// Desk-scale settings: trains in under two minutes on one core.
    fn default() -> Self {
        let world = WorldConfig::default();
        Self {
            model: ModelConfig {
                d_obs: world.d_obs(),
                d_model: 64,
                n_blocks: 2,
                d_latent: 48,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                epochs: 20,
                ..TrainConfig::default()
            },
            world,
            train_episodes: 200,
            calibration_episode: 500_000,
            calibration_len: 1500,
            calibration: CalibrationConfig::default(),
            bench: BenchConfig::default(),
            suite: FaultSuite::default(),
            saliency: SaliencyConfig::default(),
            endpoint: EndpointConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.model.d_obs != self.world.d_obs() {
            return Err(crate::RaptError::Config(format!(
                "model.d_obs = {} but the world emits {} channels",
                self.model.d_obs,
                self.world.d_obs()
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_default_and_round_trips() {
        let c = RunConfig::from_json("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn unknown_and_inconsistent_keys_fail() {
        assert!(RunConfig::from_json(r#"{"wrld":{}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"model":{"d_obs":3}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train":{"epochs":0}}"#).is_err());
    }
}
