//! Helpers and independent oracles shared by the integration test targets.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rapt_core::model::{ModelConfig, Normalizer, RaptModel, WindowBatch};
use rapt_core::train::batch_gradients;
use rapt_core::{Tensor, TrajectoryLog};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Model with every tensor perturbed, so biases and LN affines are non-trivial.
pub fn random_model(cfg: ModelConfig, seed: u64) -> RaptModel {
    let width = cfg.d_obs + cfg.d_act;
    let mut m = RaptModel::init(cfg, Normalizer::identity(width), seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    for (name, t) in m.params.iter_mut() {
        let base = if name.ends_with("gamma") { 1.0 } else { 0.0 };
        for v in t.data_mut() {
            *v = base + r.random_range(-0.4..0.4);
        }
    }
    m
}

pub fn random_log(d_obs: usize, len: usize, seed: u64) -> TrajectoryLog {
    let mut r = rng(seed);
    let mut log = TrajectoryLog::new(d_obs, 0);
    for t in 0..len {
        let row: Vec<f64> = (0..d_obs).map(|_| r.random_range(-2.0..2.0)).collect();
        log.push(t as f64, &row, None).unwrap();
    }
    log
}

pub fn random_batch(d_in: usize, d_obs: usize, rows: usize, steps: usize, seed: u64) -> WindowBatch {
    let mut r = rng(seed);
    let mut m = |c: usize| {
        let v: Vec<f64> = (0..rows * c).map(|_| r.random_range(-1.5..1.5)).collect();
        Tensor::matrix(rows, c, v).unwrap()
    };
    let inputs = (0..steps).map(|_| m(d_in)).collect();
    let targets = (0..steps).map(|_| m(d_obs)).collect();
    WindowBatch { inputs, targets }
}

pub struct FdReport {
    pub checked: usize,
    pub max_rel: f64,
    pub worst: String,
}

/// Compares analytic gradients of the mean NLL against central differences
/// for every scalar parameter.
pub fn finite_difference_check(model: &RaptModel, batch: &WindowBatch, h: f64) -> FdReport {
    let n = (batch.rows() * batch.steps() * model.config.d_obs) as f64;
    let (grads, _) = batch_gradients(model, batch, 1.0 / n).unwrap();
    let loss = |m: &RaptModel| batch_gradients(m, batch, 1.0).unwrap().1 / n;
    let mut probe = model.clone();
    let mut rep = FdReport { checked: 0, max_rel: 0.0, worst: String::new() };
    let names: Vec<String> = model.params.keys().cloned().collect();
    for name in names {
        let len = model.params[&name].data().len();
        for k in 0..len {
            let orig = model.params[&name].data()[k];
            probe.params.get_mut(&name).unwrap().data_mut()[k] = orig + h;
            let up = loss(&probe);
            probe.params.get_mut(&name).unwrap().data_mut()[k] = orig - h;
            let down = loss(&probe);
            probe.params.get_mut(&name).unwrap().data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads[&name].data()[k];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            if rel > rep.max_rel {
                rep.max_rel = rel;
                rep.worst = format!("{name}[{k}] analytic={analytic:e} numeric={numeric:e}");
            }
            rep.checked += 1;
        }
    }
    rep
}

/// O(n^2) pairwise AUROC: P(score_pos > score_neg) + 0.5 P(tie).
pub fn pairwise_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for (i, &a) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &b) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            if a > b {
                num += 1.0;
            } else if a == b {
                num += 0.5;
            }
        }
    }
    num / pairs
}

/// Tries every observed score (and +/-inf) as a threshold; a score is flagged
/// when strictly above it. Returns the best TPR among thresholds whose
/// nominal FPR stays within `budget`.
pub fn sweep_tpr(nominal: &[f64], anomalous: &[f64], budget: f64) -> f64 {
    let mut cands: Vec<f64> = nominal.iter().chain(anomalous).copied().collect();
    cands.push(f64::NEG_INFINITY);
    cands.push(f64::INFINITY);
    let frac = |xs: &[f64], thr: f64| xs.iter().filter(|&&s| s > thr).count() as f64 / xs.len() as f64;
    cands
        .into_iter()
        .filter(|&thr| frac(nominal, thr) <= budget + 1e-12)
        .map(|thr| frac(anomalous, thr))
        .fold(0.0, f64::max)
}
