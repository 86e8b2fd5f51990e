//! Forward-only evaluation. No autodiff graph is built here; all buffers
//! live in a reusable [`StreamState`].

use num_traits::Float;

use super::names::*;
use super::{ModelConfig, Normalizer, Objective, RaptModel, LN_EPS};
use crate::error::{RaptError, Result};
use crate::kernels::{self, gaussian_nll};
use crate::trajectory::TrajectoryLog;

#[derive(Debug, Clone)]
struct BlockWeights<F> {
    w: Vec<F>,
    b: Vec<F>,
    gamma: Vec<F>,
    beta: Vec<F>,
}

/// Immutable weights at precision `F`; shareable across monitoring threads.
#[derive(Debug, Clone)]
pub struct InferenceModel<F> {
    config: ModelConfig,
    norm: Normalizer,
    enc_w: Vec<F>,
    enc_b: Vec<F>,
    blocks: Vec<BlockWeights<F>>,
    w_ih: Vec<F>,
    w_hh: Vec<F>,
    b_ih: Vec<F>,
    b_hn: Vec<F>,
    bot_w: Vec<F>,
    bot_b: Vec<F>,
    bot_g: Vec<F>,
    bot_beta: Vec<F>,
    dec_hw: Vec<F>,
    dec_hb: Vec<F>,
    dec_ow: Vec<F>,
    dec_ob: Vec<F>,
}

/// Output of a single model step, in `f64` regardless of the model precision.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
    pub nll_per_dim: Vec<f64>,
    pub nll_mean: f64,
    pub hidden: Vec<f64>,
}

/// Per-step anomaly residuals produced while streaming.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredStep {
    pub nll_per_dim: Vec<f64>,
    pub nll_mean: f64,
    /// False when no prediction existed for this step (first step of a
    /// next-step objective) or the observation was not finite.
    pub scored: bool,
}

#[derive(Debug, Clone)]
struct Scratch<F> {
    input: Vec<F>,
    x: Vec<F>,
    tmp: Vec<F>,
    gi: Vec<F>,
    gh: Vec<F>,
    z: Vec<F>,
    u: Vec<F>,
    out: Vec<F>,
    target: Vec<f64>,
}

/// Recurrent state owned by exactly one stream.
#[derive(Debug, Clone)]
pub struct StreamState<F> {
    hidden: Vec<F>,
    /// Decoder output `[mu | logvar]` awaiting the next observation
    /// (next-step objective only).
    prediction: Option<Vec<F>>,
    step: usize,
    scratch: Scratch<F>,
}

impl<F: Float> StreamState<F> {
    pub fn hidden(&self) -> &[F] {
        &self.hidden
    }

    /// Number of observations consumed since the stream started.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn set_hidden(&mut self, h: &[F]) {
        self.hidden.copy_from_slice(h);
    }
}

fn cast<F: Float>(v: &[f64]) -> Vec<F> {
    v.iter().map(|&x| F::from(x).unwrap()).collect()
}

impl<F: Float> InferenceModel<F> {
    pub fn from_model(model: &RaptModel) -> Self {
        let p = |name: &str| cast::<F>(model.params[name].data());
        Self {
            config: model.config.clone(),
            norm: model.norm.clone(),
            enc_w: p(ENC_IN_W),
            enc_b: p(ENC_IN_B),
            blocks: (0..model.config.n_blocks)
                .map(|i| BlockWeights {
                    w: p(&block(i, "linear.weight")),
                    b: p(&block(i, "linear.bias")),
                    gamma: p(&block(i, "norm.gamma")),
                    beta: p(&block(i, "norm.beta")),
                })
                .collect(),
            w_ih: p(GRU_W_IH),
            w_hh: p(GRU_W_HH),
            b_ih: p(GRU_B_IH),
            b_hn: p(GRU_B_HN),
            bot_w: p(BOT_W),
            bot_b: p(BOT_B),
            bot_g: p(BOT_G),
            bot_beta: p(BOT_BETA),
            dec_hw: p(DEC_H_W),
            dec_hb: p(DEC_H_B),
            dec_ow: p(DEC_O_W),
            dec_ob: p(DEC_O_B),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.norm
    }

    pub fn d_obs(&self) -> usize {
        self.config.d_obs
    }

    /// Fresh stream with a zero hidden state.
    pub fn new_state(&self) -> StreamState<F> {
        let c = &self.config;
        let d = c.d_model;
        StreamState {
            hidden: vec![F::zero(); d],
            prediction: None,
            step: 0,
            scratch: Scratch {
                input: vec![F::zero(); c.d_in()],
                x: vec![F::zero(); d],
                tmp: vec![F::zero(); d],
                gi: vec![F::zero(); 3 * d],
                gh: vec![F::zero(); 3 * d],
                z: vec![F::zero(); c.d_latent],
                u: vec![F::zero(); d],
                out: vec![F::zero(); 2 * c.d_obs],
                target: vec![0.0; c.d_obs],
            },
        }
    }

    /// Writes the normalized (and optionally action-augmented) encoder input.
    fn prepare_input(&self, obs: &[f64], act: Option<&[f64]>, input: &mut [F]) -> Result<()> {
        let c = &self.config;
        if obs.len() != c.d_obs {
            return Err(RaptError::Input(format!(
                "observation has {} values, model expects {}",
                obs.len(),
                c.d_obs
            )));
        }
        if obs.iter().any(|v| !v.is_finite()) {
            return Err(RaptError::Input("non-finite observation".into()));
        }
        for (i, slot) in input[..c.d_obs].iter_mut().enumerate() {
            *slot = F::from((obs[i] - self.norm.mean[i]) / self.norm.std[i]).unwrap();
        }
        if c.condition_on_actions {
            let a = act.ok_or_else(|| RaptError::Input("model is action-conditioned".into()))?;
            if a.len() != c.d_act || a.iter().any(|v| !v.is_finite()) {
                return Err(RaptError::Input("invalid action vector".into()));
            }
            for (i, slot) in input[c.d_obs..].iter_mut().enumerate() {
                let k = c.d_obs + i;
                *slot = F::from((a[i] - self.norm.mean[k]) / self.norm.std[k]).unwrap();
            }
        }
        Ok(())
    }

    /// Encoder, GRU and decoder on an already-normalized input. Updates the
    /// hidden state in place and leaves `[mu | logvar]` in `scratch.out`.
    fn advance(&self, input: &[F], hidden: &mut [F], s: &mut Scratch<F>) {
        let c = &self.config;
        let d = c.d_model;
        let eps = F::from(LN_EPS).unwrap();

        kernels::linear(input, &self.enc_w, Some(&self.enc_b), 1, c.d_in(), d, &mut s.x);
        for blk in &self.blocks {
            kernels::linear(&s.x, &blk.w, Some(&blk.b), 1, d, d, &mut s.tmp);
            for (t, x) in s.tmp.iter_mut().zip(&s.x) {
                *t = *t + *x;
            }
            kernels::layer_norm_row(&mut s.tmp, &blk.gamma, &blk.beta, eps);
            for (x, t) in s.x.iter_mut().zip(&s.tmp) {
                *x = kernels::relu(*t);
            }
        }

        kernels::linear(&s.x, &self.w_ih, Some(&self.b_ih), 1, d, 3 * d, &mut s.gi);
        kernels::linear(hidden, &self.w_hh, None, 1, d, 3 * d, &mut s.gh);
        for j in 0..d {
            let z = kernels::sigmoid(s.gi[j] + s.gh[j]);
            let r = kernels::sigmoid(s.gi[d + j] + s.gh[d + j]);
            let n = (s.gi[2 * d + j] + r * (s.gh[2 * d + j] + self.b_hn[j])).tanh();
            hidden[j] = n + z * (hidden[j] - n);
        }

        kernels::linear(hidden, &self.bot_w, Some(&self.bot_b), 1, d, c.d_latent, &mut s.z);
        kernels::layer_norm_row(&mut s.z, &self.bot_g, &self.bot_beta, eps);
        s.z.iter_mut().for_each(|v| *v = kernels::relu(*v));
        kernels::linear(&s.z, &self.dec_hw, Some(&self.dec_hb), 1, c.d_latent, d, &mut s.u);
        s.u.iter_mut().for_each(|v| *v = kernels::relu(*v));
        kernels::linear(&s.u, &self.dec_ow, Some(&self.dec_ob), 1, d, 2 * c.d_obs, &mut s.out);
        let (lo, hi) = (
            F::from(c.logvar_clamp[0]).unwrap(),
            F::from(c.logvar_clamp[1]).unwrap(),
        );
        for v in &mut s.out[c.d_obs..] {
            if !v.is_nan() {
                *v = v.max(lo).min(hi);
            }
        }
    }

    fn nll_against(&self, prediction: &[F], target_norm: &[f64], out: &mut Vec<f64>) -> f64 {
        let d_obs = self.config.d_obs;
        out.clear();
        let mut sum = 0.0;
        for i in 0..d_obs {
            let l = gaussian_nll(F::from(target_norm[i]).unwrap(), prediction[i], prediction[d_obs + i])
                .to_f64()
                .unwrap();
            sum += l;
            out.push(l);
        }
        sum / d_obs as f64
    }

    /// One step from raw inputs. The NLL is taken against `target` (raw
    /// observation) when given, otherwise against `obs` itself; the
    /// next-step objective requires an explicit target.
    pub fn step(
        &self,
        obs: &[f64],
        act: Option<&[f64]>,
        h_prev: &[F],
        target: Option<&[f64]>,
    ) -> Result<StepOutput> {
        let mut state = self.new_state();
        state.hidden.copy_from_slice(h_prev);
        let mut input = std::mem::take(&mut state.scratch.input);
        self.prepare_input(obs, act, &mut input)?;
        self.advance(&input, &mut state.hidden, &mut state.scratch);
        let target = match (target, self.config.objective) {
            (Some(t), _) => t,
            (None, Objective::Reconstruction) => obs,
            (None, Objective::Dynamics) => {
                return Err(RaptError::Input(
                    "next-step objective needs the following observation as target".into(),
                ))
            }
        };
        let tn = self.norm.normalize(target, 0);
        let mut nll = Vec::new();
        let mean = self.nll_against(&state.scratch.out, &tn, &mut nll);
        let d_obs = self.config.d_obs;
        let out = &state.scratch.out;
        Ok(StepOutput {
            mu: out[..d_obs].iter().map(|v| v.to_f64().unwrap()).collect(),
            logvar: out[d_obs..].iter().map(|v| v.to_f64().unwrap()).collect(),
            nll_per_dim: nll,
            nll_mean: mean,
            hidden: state.hidden.iter().map(|v| v.to_f64().unwrap()).collect(),
        })
    }

    /// Streams one observation: scores it (against the current-step
    /// reconstruction, or the prediction made on the previous call) and
    /// advances the hidden state exactly once. Non-finite observations are
    /// reported unscored and leave the hidden state untouched.
    pub fn score(
        &self,
        state: &mut StreamState<F>,
        obs: &[f64],
        act: Option<&[f64]>,
    ) -> Result<ScoredStep> {
        let d_obs = self.config.d_obs;
        state.step += 1;
        let mut input = std::mem::take(&mut state.scratch.input);
        let prepared = self.prepare_input(obs, act, &mut input);
        if let Err(e) = prepared {
            state.scratch.input = input;
            if obs.len() == d_obs && obs.iter().any(|v| !v.is_finite()) {
                state.prediction = None;
                return Ok(ScoredStep {
                    nll_per_dim: vec![0.0; d_obs],
                    nll_mean: 0.0,
                    scored: false,
                });
            }
            return Err(e);
        }
        let mut target = std::mem::take(&mut state.scratch.target);
        self.norm.normalize_into(obs, 0, &mut target);
        let mut nll = Vec::with_capacity(d_obs);
        let result = match self.config.objective {
            Objective::Reconstruction => {
                self.advance(&input, &mut state.hidden, &mut state.scratch);
                let mean = self.nll_against(&state.scratch.out, &target, &mut nll);
                ScoredStep {
                    nll_per_dim: nll,
                    nll_mean: mean,
                    scored: true,
                }
            }
            Objective::Dynamics => {
                let scored = match &state.prediction {
                    Some(pred) => {
                        let mean = self.nll_against(pred, &target, &mut nll);
                        Some(mean)
                    }
                    None => None,
                };
                self.advance(&input, &mut state.hidden, &mut state.scratch);
                match &mut state.prediction {
                    Some(p) => p.copy_from_slice(&state.scratch.out),
                    None => state.prediction = Some(state.scratch.out.clone()),
                }
                match scored {
                    Some(mean) => ScoredStep {
                        nll_per_dim: nll,
                        nll_mean: mean,
                        scored: true,
                    },
                    None => ScoredStep {
                        nll_per_dim: vec![0.0; d_obs],
                        nll_mean: 0.0,
                        scored: false,
                    },
                }
            }
        };
        state.scratch.input = input;
        state.scratch.target = target;
        Ok(result)
    }

    /// Scores a whole log from a fresh zero state.
    pub fn score_log(&self, log: &TrajectoryLog) -> Result<Vec<ScoredStep>> {
        let mut state = self.new_state();
        (0..log.len())
            .map(|t| self.score(&mut state, log.obs(t), log.action(t)))
            .collect()
    }

    /// Sequential steps from `h0`. Step `t` is scored against its own
    /// observation (reconstruction) or against step `t + 1` (next-step
    /// objective, which therefore yields one output fewer). Returns the
    /// outputs and the final hidden state for online continuation.
    pub fn forward_sequence(
        &self,
        window: &TrajectoryLog,
        h0: &[F],
    ) -> Result<(Vec<StepOutput>, Vec<F>)> {
        if window.is_empty() {
            return Err(RaptError::Input("empty window".into()));
        }
        let mut h = h0.to_vec();
        let mut outs = Vec::with_capacity(window.len());
        for t in 0..window.len() {
            let target = match self.config.objective {
                Objective::Reconstruction => Some(window.obs(t)),
                Objective::Dynamics if t + 1 < window.len() => Some(window.obs(t + 1)),
                Objective::Dynamics => None,
            };
            match target {
                Some(target) => {
                    let out = self.step(window.obs(t), window.action(t), &h, Some(target))?;
                    h = cast(&out.hidden);
                    outs.push(out);
                }
                None => {
                    let mut state = self.new_state();
                    state.hidden.copy_from_slice(&h);
                    let mut input = vec![F::zero(); self.config.d_in()];
                    self.prepare_input(window.obs(t), window.action(t), &mut input)?;
                    self.advance(&input, &mut state.hidden, &mut state.scratch);
                    h = state.hidden;
                }
            }
        }
        Ok((outs, h))
    }
}
