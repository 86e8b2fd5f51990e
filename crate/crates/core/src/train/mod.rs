//! Training on nominal trajectories: window sampling, denoising corruption,
//! AdamW under a one-cycle schedule, and gradient clipping.

mod optim;
mod windows;

pub use optim::{
    adamw_step, clip_grad_norm, global_norm, one_cycle_lr, AdamState, OneCycle, ADAM_EPS, BETA1,
    BETA2,
};
pub use windows::{make_windows, Window, WindowSampler};

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamSet};
use crate::error::{RaptError, Result};
use crate::model::{GraphModel, ModelConfig, Normalizer, RaptModel, WindowBatch};
use crate::par::ExecMode;
use crate::tensor::Tensor;
use crate::trajectory::TrajectoryLog;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
    /// Unroll length `T`.
    pub unroll: usize,
    pub schedule: OneCycle,
    pub seed: u64,
    pub grad_clip_norm: f64,
    /// Fraction of trajectories (taken from the end) held out for validation.
    pub holdout_fraction: f64,
    /// Windows per autodiff graph; chunks are reduced in a fixed order.
    pub chunk_windows: usize,
    pub exec: ExecMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 256,
            peak_lr: 1e-3,
            weight_decay: 1e-2,
            unroll: 50,
            schedule: OneCycle::default(),
            seed: 0,
            grad_clip_norm: 1.0,
            holdout_fraction: 0.1,
            chunk_windows: 32,
            exec: ExecMode::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(RaptError::Config(format!("train: {m}")));
        if self.epochs == 0 {
            return fail("epochs must be >= 1");
        }
        if self.batch_size == 0 || self.unroll == 0 || self.chunk_windows == 0 {
            return fail("batch_size, unroll and chunk_windows must be >= 1");
        }
        if !(self.peak_lr > 0.0) || !(self.weight_decay >= 0.0) || !(self.grad_clip_norm > 0.0) {
            return fail("peak_lr and grad_clip_norm must be positive, weight_decay non-negative");
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return fail("holdout_fraction must be in [0, 1)");
        }
        self.schedule.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-element training NLL (noisy inputs) for each epoch.
    pub train_nll: Vec<f64>,
    /// Mean per-element NLL on held-out trajectories (clean inputs); empty
    /// when nothing was held out.
    pub heldout_nll: Vec<f64>,
    /// Learning rate at the final step of each epoch.
    pub epoch_lr: Vec<f64>,
    /// Learning rate applied at every optimizer step.
    pub step_lr: Vec<f64>,
    /// Largest global gradient norm after clipping.
    pub max_clipped_grad_norm: f64,
    pub steps_per_epoch: usize,
    pub train_trajectories: usize,
    pub heldout_trajectories: usize,
    pub epoch_seconds: Vec<f64>,
    pub wall_clock_seconds: f64,
}

/// Per-epoch progress passed to [`train_with`] callbacks.
#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_nll: f64,
    pub heldout_nll: Option<f64>,
    pub lr: f64,
    pub seconds: f64,
}

struct Prepared {
    /// `[len x d_in]` normalized encoder inputs.
    inputs: Vec<f64>,
    /// `[len x d_obs]` normalized clean observations.
    targets: Vec<f64>,
}

fn prepare(model: &RaptModel, log: &TrajectoryLog) -> Result<Prepared> {
    let c = &model.config;
    if log.d_obs() != c.d_obs || (c.condition_on_actions && log.d_act() != c.d_act) {
        return Err(RaptError::Input(format!(
            "trajectory layout ({} obs, {} act) does not match model ({} obs, {} act)",
            log.d_obs(),
            log.d_act(),
            c.d_obs,
            c.d_act
        )));
    }
    let d_in = c.d_in();
    let mut inputs = vec![0.0; log.len() * d_in];
    let mut targets = vec![0.0; log.len() * c.d_obs];
    for t in 0..log.len() {
        let row = &mut inputs[t * d_in..(t + 1) * d_in];
        model.norm.normalize_into(log.obs(t), 0, &mut row[..c.d_obs]);
        if c.condition_on_actions {
            let act = log.action(t).expect("action width checked");
            model.norm.normalize_into(act, c.d_obs, &mut row[c.d_obs..]);
        }
        targets[t * c.d_obs..(t + 1) * c.d_obs].copy_from_slice(&row[..c.d_obs]);
    }
    if inputs.iter().any(|v| !v.is_finite()) {
        return Err(RaptError::Input("training data contains non-finite values".into()));
    }
    Ok(Prepared { inputs, targets })
}

/// Assembles a time-major batch; `noise` holds `[windows x T x d_in]` values.
fn assemble(
    cfg: &ModelConfig,
    data: &[Prepared],
    windows: &[Window],
    unroll: usize,
    noise: &[f64],
) -> WindowBatch {
    let (d_in, d_obs, off) = (cfg.d_in(), cfg.d_obs, cfg.target_offset());
    let rows = windows.len();
    let mut inputs = Vec::with_capacity(unroll);
    let mut targets = Vec::with_capacity(unroll);
    for t in 0..unroll {
        let mut x = Vec::with_capacity(rows * d_in);
        let mut y = Vec::with_capacity(rows * d_obs);
        for (r, w) in windows.iter().enumerate() {
            let p = &data[w.traj];
            let s = w.start + t;
            let nz = &noise[(r * unroll + t) * d_in..(r * unroll + t + 1) * d_in];
            x.extend(p.inputs[s * d_in..(s + 1) * d_in].iter().zip(nz).map(|(a, b)| a + b));
            let s = s + off;
            y.extend_from_slice(&p.targets[s * d_obs..(s + 1) * d_obs]);
        }
        inputs.push(Tensor::matrix(rows, d_in, x).expect("batch shape"));
        targets.push(Tensor::matrix(rows, d_obs, y).expect("batch shape"));
    }
    WindowBatch { inputs, targets }
}

/// Gradient of `scale * sum(nll)` over a batch, plus the raw NLL sum.
pub fn batch_gradients(model: &RaptModel, batch: &WindowBatch, scale: f64) -> Result<(ParamSet, f64)> {
    let mut g = Graph::new();
    let gm = GraphModel::register(&mut g, model);
    let (loss, raw) = gm.window_loss(&mut g, batch, scale)?;
    let grads = g.backward(loss)?;
    Ok((g.param_grads(&grads), raw))
}

fn add_into(acc: &mut ParamSet, other: ParamSet) {
    for (k, v) in other {
        match acc.get_mut(&k) {
            Some(a) => a.add_assign(&v),
            None => {
                acc.insert(k, v);
            }
        }
    }
}

/// Mean per-element NLL over non-overlapping windows of `logs`, scored from
/// a zero hidden state with clean inputs.
pub fn evaluate_nll(model: &RaptModel, logs: &[TrajectoryLog], unroll: usize, exec: ExecMode) -> Result<f64> {
    let need = unroll + model.config.target_offset();
    let mut windows = Vec::new();
    for (i, log) in logs.iter().enumerate() {
        let mut s = 0;
        while s + need <= log.len() {
            windows.push((i, s));
            s += need;
        }
    }
    if windows.is_empty() {
        return Err(RaptError::TrajectoryTooShort {
            len: logs.iter().map(TrajectoryLog::len).max().unwrap_or(0),
            required: need,
        });
    }
    let inf = model.inference::<f64>();
    let sums = exec.map(&windows, |&(i, s)| -> Result<(f64, usize)> {
        let scored = inf.score_log(&logs[i].slice(s, s + need))?;
        Ok(scored
            .iter()
            .filter(|x| x.scored)
            .fold((0.0, 0), |(a, n), x| (a + x.nll_per_dim.iter().sum::<f64>(), n + x.nll_per_dim.len())))
    });
    let (mut total, mut count) = (0.0, 0usize);
    for r in sums {
        let (s, n) = r?;
        total += s;
        count += n;
    }
    Ok(total / count as f64)
}

/// Fits normalization statistics on `dataset` and returns a fresh model.
pub fn init_model(dataset: &[TrajectoryLog], config: ModelConfig, seed: u64) -> Result<RaptModel> {
    let norm = Normalizer::fit(dataset)?;
    RaptModel::init(config, norm, seed)
}

pub fn train(model: RaptModel, dataset: &[TrajectoryLog], cfg: &TrainConfig) -> Result<(RaptModel, TrainReport)> {
    train_with(model, dataset, cfg, |_| {})
}

/// Trains `model` in place of the caller; `on_epoch` observes progress.
pub fn train_with(
    mut model: RaptModel,
    dataset: &[TrajectoryLog],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<(RaptModel, TrainReport)> {
    cfg.validate()?;
    model.validate()?;
    let started = Instant::now();
    let n_hold = if dataset.len() >= 2 && cfg.holdout_fraction > 0.0 {
        ((dataset.len() as f64 * cfg.holdout_fraction).round() as usize).clamp(1, dataset.len() - 1)
    } else {
        0
    };
    let (train_logs, hold_logs) = dataset.split_at(dataset.len() - n_hold);
    let data: Vec<Prepared> = train_logs.iter().map(|l| prepare(&model, l)).collect::<Result<_>>()?;

    let window_len = cfg.unroll + model.config.target_offset();
    let mut sampler = WindowSampler::new(train_logs, window_len, cfg.batch_size, cfg.seed)?;
    let steps_per_epoch = sampler.steps_per_epoch();
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9));
    let noise_dist = Normal::new(0.0, model.config.noise_sigma)
        .map_err(|e| RaptError::Config(format!("noise_sigma: {e}")))?;
    let d_in = model.config.d_in();
    let elems_per_batch = (cfg.batch_size * cfg.unroll * model.config.d_obs) as f64;

    let mut state = AdamState::new(&model.params);
    let mut report = TrainReport {
        train_nll: Vec::with_capacity(cfg.epochs),
        heldout_nll: Vec::with_capacity(cfg.epochs),
        epoch_lr: Vec::with_capacity(cfg.epochs),
        step_lr: Vec::with_capacity(total_steps),
        max_clipped_grad_norm: 0.0,
        steps_per_epoch,
        train_trajectories: train_logs.len(),
        heldout_trajectories: hold_logs.len(),
        epoch_seconds: Vec::with_capacity(cfg.epochs),
        wall_clock_seconds: 0.0,
    };

    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let epoch_start = Instant::now();
        let mut epoch_sum = 0.0;
        for windows in sampler.epoch() {
            let noise: Vec<f64> = if model.config.noise_sigma > 0.0 {
                (0..windows.len() * cfg.unroll * d_in)
                    .map(|_| noise_dist.sample(&mut noise_rng))
                    .collect()
            } else {
                vec![0.0; windows.len() * cfg.unroll * d_in]
            };
            let chunk_ids: Vec<usize> = (0..windows.len().div_ceil(cfg.chunk_windows)).collect();
            let per_chunk = cfg.exec.map(&chunk_ids, |&c| {
                let lo = c * cfg.chunk_windows;
                let hi = (lo + cfg.chunk_windows).min(windows.len());
                let nz = &noise[lo * cfg.unroll * d_in..hi * cfg.unroll * d_in];
                let batch = assemble(&model.config, &data, &windows[lo..hi], cfg.unroll, nz);
                batch_gradients(&model, &batch, 1.0 / elems_per_batch)
            });
            let mut grads = ParamSet::new();
            let mut raw = 0.0;
            for r in per_chunk {
                let (g, s) = r?;
                add_into(&mut grads, g);
                raw += s;
            }
            let batch_nll = raw / elems_per_batch;
            if !batch_nll.is_finite() || grads.values().any(|g| !g.is_finite()) {
                let param = grads
                    .iter()
                    .find(|(_, g)| !g.is_finite())
                    .map_or_else(|| "<loss>".to_string(), |(k, _)| k.clone());
                return Err(RaptError::NonFiniteLoss { step, param });
            }
            clip_grad_norm(&mut grads, cfg.grad_clip_norm);
            report.max_clipped_grad_norm = report.max_clipped_grad_norm.max(global_norm(&grads));
            let lr = cfg.schedule.lr(step, total_steps, cfg.peak_lr)?;
            adamw_step(&mut model.params, &grads, &mut state, lr, cfg.weight_decay)?;
            report.step_lr.push(lr);
            epoch_sum += batch_nll;
            step += 1;
        }
        let train_nll = epoch_sum / steps_per_epoch as f64;
        let heldout = if hold_logs.is_empty() {
            None
        } else {
            Some(evaluate_nll(&model, hold_logs, cfg.unroll, cfg.exec)?)
        };
        let seconds = epoch_start.elapsed().as_secs_f64();
        let lr = *report.step_lr.last().expect("at least one step per epoch");
        report.train_nll.push(train_nll);
        if let Some(h) = heldout {
            report.heldout_nll.push(h);
        }
        report.epoch_lr.push(lr);
        report.epoch_seconds.push(seconds);
        on_epoch(&EpochStats {
            epoch,
            train_nll,
            heldout_nll: heldout,
            lr,
            seconds,
        });
    }
    report.wall_clock_seconds = started.elapsed().as_secs_f64();
    Ok((model, report))
}
