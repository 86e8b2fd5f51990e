use serde::{Deserialize, Serialize};

use crate::error::{RaptError, Result};

/// What the decoder is trained to predict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Reconstruct the clean current observation.
    Reconstruction,
    /// Predict the next observation.
    Dynamics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_obs: usize,
    /// Action width; 0 when the logs carry no actions.
    pub d_act: usize,
    pub d_model: usize,
    pub n_blocks: usize,
    pub d_latent: usize,
    pub objective: Objective,
    pub condition_on_actions: bool,
    /// Std of the additive corruption applied to encoder inputs during training.
    pub noise_sigma: f64,
    pub logvar_clamp: [f64; 2],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_obs: 24,
            d_act: 0,
            d_model: 256,
            n_blocks: 4,
            d_latent: 192,
            objective: Objective::Reconstruction,
            condition_on_actions: false,
            noise_sigma: 0.01,
            logvar_clamp: [-10.0, 10.0],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(RaptError::Config(format!("model: {m}")));
        if self.d_obs == 0 {
            return fail("d_obs must be positive");
        }
        if self.d_model == 0 {
            return fail("d_model must be positive");
        }
        if self.d_latent == 0 || self.d_latent > self.d_model {
            return fail("d_latent must be in [1, d_model]");
        }
        if !(self.noise_sigma >= 0.0) {
            return fail("noise_sigma must be non-negative");
        }
        let [lo, hi] = self.logvar_clamp;
        if !(lo < hi) {
            return fail("logvar_clamp must satisfy lo < hi");
        }
        if self.condition_on_actions && self.d_act == 0 {
            return fail("condition_on_actions requires d_act > 0");
        }
        Ok(())
    }

    /// Width of the encoder input row.
    pub fn d_in(&self) -> usize {
        if self.condition_on_actions {
            self.d_obs + self.d_act
        } else {
            self.d_obs
        }
    }

    /// Extra trailing steps a training window needs beyond the unroll length.
    pub fn target_offset(&self) -> usize {
        match self.objective {
            Objective::Reconstruction => 0,
            Objective::Dynamics => 1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_inverted_clamp_and_wide_latent() {
        let mut c = ModelConfig {
            logvar_clamp: [1.0, 1.0],
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
        c.logvar_clamp = [-10.0, 10.0];
        c.d_latent = c.d_model + 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let r: std::result::Result<ModelConfig, _> = serde_json::from_str(r#"{"d_modle": 3}"#);
        assert!(r.is_err());
    }
}
