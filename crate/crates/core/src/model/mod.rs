//! The recurrent probabilistic trajectory model: residual encoder, GRU latent
//! bridge, LayerNorm bottleneck and a diagonal-Gaussian decoder.

mod config;
mod graph;
mod infer;
mod norm;

pub use config::{ModelConfig, Objective};
pub use graph::{GraphModel, WindowBatch};
pub use infer::{InferenceModel, ScoredStep, StepOutput, StreamState};
pub use norm::Normalizer;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::ParamSet;
use crate::error::{RaptError, Result};
use crate::tensor::Tensor;

/// LayerNorm epsilon used throughout the network.
pub const LN_EPS: f64 = 1e-5;

/// Parameter names, grouped by sub-network.
pub(crate) mod names {
    pub const ENC_IN_W: &str = "encoder.input.weight";
    pub const ENC_IN_B: &str = "encoder.input.bias";
    pub const GRU_W_IH: &str = "gru.weight_ih";
    pub const GRU_W_HH: &str = "gru.weight_hh";
    pub const GRU_B_IH: &str = "gru.bias_ih";
    pub const GRU_B_HN: &str = "gru.bias_hn";
    pub const BOT_W: &str = "bottleneck.weight";
    pub const BOT_B: &str = "bottleneck.bias";
    pub const BOT_G: &str = "bottleneck.norm.gamma";
    pub const BOT_BETA: &str = "bottleneck.norm.beta";
    pub const DEC_H_W: &str = "decoder.hidden.weight";
    pub const DEC_H_B: &str = "decoder.hidden.bias";
    pub const DEC_O_W: &str = "decoder.out.weight";
    pub const DEC_O_B: &str = "decoder.out.bias";

    pub fn block(i: usize, leaf: &str) -> String {
        format!("encoder.block{i}.{leaf}")
    }
}

/// Trainable parameters plus the normalization statistics they were fit with.
#[derive(Debug, Clone, PartialEq)]
pub struct RaptModel {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub norm: Normalizer,
}

/// Expected shape of every parameter for a configuration, in sorted order.
pub fn param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    use names::*;
    let (d, d_in, d_lat, d_obs) = (cfg.d_model, cfg.d_in(), cfg.d_latent, cfg.d_obs);
    let mut v: Vec<(String, Vec<usize>)> = vec![
        (ENC_IN_W.into(), vec![d, d_in]),
        (ENC_IN_B.into(), vec![d]),
        (GRU_W_IH.into(), vec![3 * d, d]),
        (GRU_W_HH.into(), vec![3 * d, d]),
        (GRU_B_IH.into(), vec![3 * d]),
        (GRU_B_HN.into(), vec![d]),
        (BOT_W.into(), vec![d_lat, d]),
        (BOT_B.into(), vec![d_lat]),
        (BOT_G.into(), vec![d_lat]),
        (BOT_BETA.into(), vec![d_lat]),
        (DEC_H_W.into(), vec![d, d_lat]),
        (DEC_H_B.into(), vec![d]),
        (DEC_O_W.into(), vec![2 * d_obs, d]),
        (DEC_O_B.into(), vec![2 * d_obs]),
    ];
    for i in 0..cfg.n_blocks {
        v.push((block(i, "linear.weight"), vec![d, d]));
        v.push((block(i, "linear.bias"), vec![d]));
        v.push((block(i, "norm.gamma"), vec![d]));
        v.push((block(i, "norm.beta"), vec![d]));
    }
    v.sort();
    v
}

impl RaptModel {
    /// Fresh model with seeded fan-in uniform weights, zero biases and
    /// identity LayerNorm affines.
    pub fn init(config: ModelConfig, norm: Normalizer, seed: u64) -> Result<Self> {
        config.validate()?;
        let width = config.d_obs + config.d_act;
        if norm.width() != width {
            return Err(RaptError::Config(format!(
                "normalizer covers {} channels, model expects {width}",
                norm.width()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (name, shape) in param_shapes(&config) {
            let t = if name.ends_with("gamma") {
                Tensor::filled(&shape, 1.0)
            } else if shape.len() == 2 {
                let bound = 1.0 / (shape[1] as f64).sqrt();
                let n = shape[0] * shape[1];
                let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                Tensor::new(shape, data)?
            } else {
                Tensor::zeros(&shape)
            };
            params.insert(name, t);
        }
        Ok(Self {
            config,
            params,
            norm,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Checks that the parameter table matches the configuration exactly.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let expected = param_shapes(&self.config);
        if expected.len() != self.params.len() {
            return Err(RaptError::Config(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                self.params.len()
            )));
        }
        for (name, shape) in expected {
            match self.params.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(RaptError::Config(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(RaptError::Config(format!("missing parameter {name}"))),
            }
        }
        if self.norm.std.iter().any(|s| !(*s > 0.0)) {
            return Err(RaptError::Config("normalization std must be positive".into()));
        }
        Ok(())
    }

    /// Forward-only copy of the weights at precision `F`.
    pub fn inference<F: num_traits::Float>(&self) -> InferenceModel<F> {
        InferenceModel::from_model(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_parameter_count_is_pinned() {
        let cfg = ModelConfig {
            d_obs: 140,
            ..ModelConfig::default()
        };
        let m = RaptModel::init(cfg, Normalizer::identity(140), 0).unwrap();
        assert_eq!(m.param_count(), 866_648);
    }

    #[test]
    fn init_is_seeded_and_validates() {
        let cfg = ModelConfig {
            d_obs: 4,
            d_model: 8,
            n_blocks: 2,
            d_latent: 6,
            ..ModelConfig::default()
        };
        let a = RaptModel::init(cfg.clone(), Normalizer::identity(4), 7).unwrap();
        let b = RaptModel::init(cfg.clone(), Normalizer::identity(4), 7).unwrap();
        let c = RaptModel::init(cfg, Normalizer::identity(4), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        a.validate().unwrap();
    }

    #[test]
    fn normalizer_width_must_match() {
        let cfg = ModelConfig {
            d_obs: 4,
            ..ModelConfig::default()
        };
        assert!(RaptModel::init(cfg, Normalizer::identity(5), 0).is_err());
    }
}
