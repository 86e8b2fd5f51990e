use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamSet;
use crate::error::{RaptError, Result};
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates for AdamW.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ParamSet,
    pub v: ParamSet,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: ParamSet = params
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One AdamW update: decoupled decay `p -= lr * wd * p`, then the
/// bias-corrected Adam step.
pub fn adamw_step(
    params: &mut ParamSet,
    grads: &ParamSet,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    state.t += 1;
    let bc1 = 1.0 - BETA1.powi(state.t as i32);
    let bc2 = 1.0 - BETA2.powi(state.t as i32);
    for (name, p) in params.iter_mut() {
        let (Some(g), Some(m), Some(v)) = (grads.get(name), state.m.get_mut(name), state.v.get_mut(name))
        else {
            return Err(RaptError::Contract(format!("optimizer state missing {name}")));
        };
        if g.shape() != p.shape() || m.shape() != p.shape() {
            return Err(RaptError::Contract(format!("optimizer shape mismatch for {name}")));
        }
        let (pd, gd) = (p.data_mut(), g.data());
        let (md, vd) = (m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            pd[i] -= lr * weight_decay * pd[i];
            md[i] = BETA1 * md[i] + (1.0 - BETA1) * gd[i];
            vd[i] = BETA2 * vd[i] + (1.0 - BETA2) * gd[i] * gd[i];
            let mhat = md[i] / bc1;
            let vhat = vd[i] / bc2;
            pd[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Global L2 norm over all gradients.
pub fn global_norm(grads: &ParamSet) -> f64 {
    grads.values().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns
/// the pre-clip norm.
pub fn clip_grad_norm(grads: &mut ParamSet, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.values_mut().for_each(|g| g.scale(s));
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OneCycle {
    pub warmup_fraction: f64,
    pub initial_div: f64,
    pub final_div: f64,
}

impl Default for OneCycle {
    fn default() -> Self {
        Self {
            warmup_fraction: 0.3,
            initial_div: 25.0,
            final_div: 1e4,
        }
    }
}

fn cos_interp(from: f64, to: f64, pct: f64) -> f64 {
    to + (from - to) / 2.0 * (1.0 + (PI * pct).cos())
}

impl OneCycle {
    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(RaptError::Config("warmup_fraction must be in (0, 1)".into()));
        }
        if !(self.initial_div > 0.0 && self.final_div > 0.0) {
            return Err(RaptError::Config("schedule divisors must be positive".into()));
        }
        Ok(())
    }

    /// Index of the step at which the peak rate is reached.
    pub fn warmup_end(&self, total_steps: usize) -> usize {
        if total_steps < 3 {
            return 0;
        }
        let w = (self.warmup_fraction * (total_steps - 1) as f64).round() as usize;
        w.clamp(1, total_steps - 2)
    }

    /// Cosine warm-up from `peak / initial_div` to `peak`, then cosine
    /// annealing to `peak / final_div` at the last step.
    pub fn lr(&self, step: usize, total_steps: usize, peak: f64) -> Result<f64> {
        if step >= total_steps {
            return Err(RaptError::Input(format!(
                "schedule step {step} out of range for {total_steps} steps"
            )));
        }
        let start = peak / self.initial_div;
        let end = peak / self.final_div;
        if total_steps < 3 {
            return Ok(if step == 0 { start } else { end });
        }
        let w = self.warmup_end(total_steps);
        Ok(if step <= w {
            cos_interp(start, peak, step as f64 / w as f64)
        } else {
            let pct = (step - w) as f64 / (total_steps - 1 - w) as f64;
            cos_interp(peak, end, pct)
        })
    }
}

/// Free-function form of [`OneCycle::lr`].
pub fn one_cycle_lr(step: usize, total_steps: usize, peak: f64, cfg: &OneCycle) -> Result<f64> {
    cfg.lr(step, total_steps, peak)
}
