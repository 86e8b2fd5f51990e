//! Calibrated out-of-distribution gates.
//!
//! * gate 1: some per-dimension NLL exceeds `tau_max_i + k_local * sigma_i`
//! * gate 2: the mean NLL exceeds `tau_global + k_global * sigma_global`
//! * gate 3: some raw observation leaves the expanded training box
//!
//! All comparisons are strict. Gates 1–2 are held off for the first
//! `warmup` steps of a stream while the hidden state settles.

use std::time::Instant;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{RaptError, Result};
use crate::model::{InferenceModel, ScoredStep, StreamState};
use crate::trajectory::TrajectoryLog;

/// Normalizer floor for gate margins with zero spread.
pub const MARGIN_EPS: f64 = 1e-6;
/// Margin reported for a non-finite observation.
pub const NONFINITE_MARGIN: f64 = 1e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub k_local: f64,
    pub k_global: f64,
    pub delta: f64,
    pub warmup: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            k_local: 5.0,
            k_global: 3.0,
            delta: 0.05,
            warmup: 10,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.k_local >= 0.0 && self.k_global >= 0.0 && self.delta >= 0.0) {
            return Err(RaptError::Config("k_local, k_global and delta must be >= 0".into()));
        }
        Ok(())
    }
}

/// Per-dimension raw observation extremes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxBounds {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl BoxBounds {
    pub fn empty(d: usize) -> Self {
        Self {
            min: vec![f64::INFINITY; d],
            max: vec![f64::NEG_INFINITY; d],
        }
    }

    pub fn extend(&mut self, log: &TrajectoryLog) -> Result<()> {
        if log.d_obs() != self.min.len() {
            return Err(RaptError::Input(format!(
                "box bounds over {} dims given a {}-dim log",
                self.min.len(),
                log.d_obs()
            )));
        }
        for t in 0..log.len() {
            for (i, &v) in log.obs(t).iter().enumerate() {
                if !v.is_finite() {
                    return Err(RaptError::Input(format!("non-finite observation at step {t}, dim {i}")));
                }
                self.min[i] = self.min[i].min(v);
                self.max[i] = self.max[i].max(v);
            }
        }
        Ok(())
    }

    pub fn from_logs<'a>(d: usize, logs: impl IntoIterator<Item = &'a TrajectoryLog>) -> Result<Self> {
        let mut b = Self::empty(d);
        for log in logs {
            b.extend(log)?;
        }
        Ok(b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationProfile {
    pub tau_max: Vec<f64>,
    pub sigma: Vec<f64>,
    pub tau_global: f64,
    pub sigma_global: f64,
    pub k_local: f64,
    pub k_global: f64,
    pub box_min: Vec<f64>,
    pub box_max: Vec<f64>,
    pub delta: f64,
    pub warmup: usize,
    pub calibration_steps: usize,
}

/// Max and population standard deviation of each column of `rows`, plus
/// the same for the row means.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualStats {
    pub tau_max: Vec<f64>,
    pub sigma: Vec<f64>,
    pub tau_global: f64,
    pub sigma_global: f64,
}

fn max_and_std(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    let var = xs.clone().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (xs.fold(f64::NEG_INFINITY, f64::max), var.sqrt())
}

/// Residual statistics over per-step NLL vectors.
pub fn residual_stats(rows: &[Vec<f64>], means: &[f64]) -> Result<ResidualStats> {
    if rows.len() < 2 || rows.len() != means.len() {
        return Err(RaptError::Input(format!(
            "calibration needs >= 2 scored steps, got {}",
            rows.len()
        )));
    }
    let d = rows[0].len();
    let mut tau_max = Vec::with_capacity(d);
    let mut sigma = Vec::with_capacity(d);
    for i in 0..d {
        let (m, s) = max_and_std(rows.iter().map(|r| r[i]));
        tau_max.push(m);
        sigma.push(s);
    }
    let (tau_global, sigma_global) = max_and_std(means.iter().copied());
    Ok(ResidualStats {
        tau_max,
        sigma,
        tau_global,
        sigma_global,
    })
}

impl CalibrationProfile {
    pub fn from_stats(stats: ResidualStats, bounds: BoxBounds, cfg: &CalibrationConfig, steps: usize) -> Self {
        Self {
            tau_max: stats.tau_max,
            sigma: stats.sigma,
            tau_global: stats.tau_global,
            sigma_global: stats.sigma_global,
            k_local: cfg.k_local,
            k_global: cfg.k_global,
            box_min: bounds.min,
            box_max: bounds.max,
            delta: cfg.delta,
            warmup: cfg.warmup,
            calibration_steps: steps,
        }
    }

    pub fn d_obs(&self) -> usize {
        self.tau_max.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.tau_max.len();
        if [self.sigma.len(), self.box_min.len(), self.box_max.len()].iter().any(|&n| n != d) {
            return Err(RaptError::Contract("calibration profile vectors differ in length".into()));
        }
        let finite = self
            .tau_max
            .iter()
            .chain(&self.sigma)
            .chain(&self.box_min)
            .chain(&self.box_max)
            .chain([&self.tau_global, &self.sigma_global])
            .all(|v| v.is_finite());
        if !finite {
            return Err(RaptError::Contract("calibration profile has non-finite entries".into()));
        }
        if self.sigma.iter().any(|&s| s < 0.0) || self.sigma_global < 0.0 {
            return Err(RaptError::Contract("negative sigma in calibration profile".into()));
        }
        if self.box_min.iter().zip(&self.box_max).any(|(lo, hi)| lo > hi) {
            return Err(RaptError::Contract("box_min exceeds box_max".into()));
        }
        if self.calibration_steps < 2 {
            return Err(RaptError::Contract("calibration_steps must be >= 2".into()));
        }
        Ok(())
    }

    pub fn local_threshold(&self, i: usize) -> f64 {
        self.tau_max[i] + self.k_local * self.sigma[i]
    }

    pub fn global_threshold(&self) -> f64 {
        self.tau_global + self.k_global * self.sigma_global
    }

    /// Half-width added on each side of the raw box for dimension `i`:
    /// `delta * range`, floored for degenerate (constant) dimensions.
    pub fn box_margin(&self, i: usize) -> f64 {
        let range = self.box_max[i] - self.box_min[i];
        let floor = 1e-6 * (1.0 + self.box_min[i].abs());
        (self.delta * range).max(floor)
    }

    pub fn bounds(&self, i: usize) -> (f64, f64) {
        let w = self.box_margin(i);
        (self.box_min[i] - w, self.box_max[i] + w)
    }

    /// Copy with different gate multipliers.
    pub fn with_k(&self, k_local: f64, k_global: f64) -> Self {
        Self {
            k_local,
            k_global,
            ..self.clone()
        }
    }
}

/// Scores `nominal_run` from a zero state and records residual statistics
/// over the scored post-warm-up steps; the raw box spans `training` and the
/// calibration run.
pub fn calibrate<F: Float>(
    model: &InferenceModel<F>,
    nominal_run: &TrajectoryLog,
    training: &[TrajectoryLog],
    cfg: &CalibrationConfig,
) -> Result<CalibrationProfile> {
    cfg.validate()?;
    let d = model.d_obs();
    if nominal_run.d_obs() != d {
        return Err(RaptError::Input(format!(
            "calibration run has {} dims, model expects {d}",
            nominal_run.d_obs()
        )));
    }
    let steps = model.score_log(nominal_run)?;
    let mut rows = Vec::new();
    let mut means = Vec::new();
    for (t, s) in steps.into_iter().enumerate() {
        if !s.scored || t < cfg.warmup {
            continue;
        }
        if !s.nll_mean.is_finite() || s.nll_per_dim.iter().any(|v| !v.is_finite()) {
            return Err(RaptError::NonFiniteScore { step: t });
        }
        means.push(s.nll_mean);
        rows.push(s.nll_per_dim);
    }
    if rows.len() < 2 {
        return Err(RaptError::TrajectoryTooShort {
            len: nominal_run.len(),
            required: cfg.warmup + 2 + usize::from(model.config().target_offset() > 0),
        });
    }
    let n = rows.len();
    let stats = residual_stats(&rows, &means)?;
    let bounds = BoxBounds::from_logs(d, training.iter().chain(std::iter::once(nominal_run)))?;
    Ok(CalibrationProfile::from_stats(stats, bounds, cfg, n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gate1 {
    pub fired: bool,
    /// Dimension with the largest `nll_i - threshold_i`.
    pub dim: usize,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gate2 {
    pub fired: bool,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gate3 {
    pub fired: bool,
    pub violations: Vec<usize>,
    /// True when the violation is a non-finite reading.
    pub non_finite: bool,
    /// Largest distance outside the expanded box (negative when inside).
    pub margin: f64,
}

/// Gate margins divided by their spread (`k * sigma + eps` for gates 1–2,
/// the box expansion for gate 3). Gates 1–2 are `None` when not live.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateScores {
    pub gate1: Option<f64>,
    pub gate2: Option<f64>,
    pub gate3: f64,
}

impl GateScores {
    pub fn max(&self) -> f64 {
        [self.gate1, self.gate2].into_iter().flatten().fold(self.gate3, f64::max)
    }

    fn merge(&self, o: &Self) -> Self {
        let m = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(x), Some(y)) => Some(x.max(y)),
            (x, y) => x.or(y),
        };
        Self {
            gate1: m(self.gate1, o.gate1),
            gate2: m(self.gate2, o.gate2),
            gate3: self.gate3.max(o.gate3),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyVerdict {
    pub t: usize,
    pub gate1: Gate1,
    pub gate2: Gate2,
    pub gate3: Gate3,
    pub anomaly: bool,
    /// False during warm-up or on unscored steps; gates 1–2 cannot fire.
    pub live: bool,
    pub normalized: GateScores,
    /// Largest normalized margin over the gates that were live.
    pub score: f64,
    pub nll_per_dim: Vec<f64>,
    pub nll_mean: f64,
    pub latency_micros: f64,
}

impl AnomalyVerdict {
    /// Equality ignoring wall-clock latency.
    pub fn same_decision(&self, other: &Self) -> bool {
        Self {
            latency_micros: 0.0,
            ..self.clone()
        } == Self {
            latency_micros: 0.0,
            ..other.clone()
        }
    }
}

/// Applies the three gates to one scored step. Pure; used by [`detect`].
pub fn evaluate_gates(profile: &CalibrationProfile, t: usize, s: &ScoredStep, obs: &[f64]) -> AnomalyVerdict {
    let d = profile.d_obs();
    let live = s.scored && t >= profile.warmup;

    let (mut dim, mut m1, mut n1) = (0, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for i in 0..d {
        let m = s.nll_per_dim[i] - profile.local_threshold(i);
        if m > m1 {
            dim = i;
            m1 = m;
        }
        n1 = n1.max(m / (profile.k_local * profile.sigma[i] + MARGIN_EPS));
    }
    let gate1 = Gate1 {
        fired: live && m1 > 0.0,
        dim,
        margin: m1,
    };
    let m2 = s.nll_mean - profile.global_threshold();
    let n2 = m2 / (profile.k_global * profile.sigma_global + MARGIN_EPS);
    let gate2 = Gate2 {
        fired: live && m2 > 0.0,
        margin: m2,
    };

    let mut violations = Vec::new();
    let (mut m3, mut n3) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    let mut non_finite = false;
    for (i, &o) in obs.iter().enumerate().take(d) {
        if !o.is_finite() {
            non_finite = true;
            violations.push(i);
            continue;
        }
        let (lo, hi) = profile.bounds(i);
        let m = (lo - o).max(o - hi);
        if o < lo || o > hi {
            violations.push(i);
        }
        m3 = m3.max(m);
        n3 = n3.max(m / profile.box_margin(i));
    }
    if non_finite {
        m3 = NONFINITE_MARGIN;
        n3 = NONFINITE_MARGIN;
    }
    let gate3 = Gate3 {
        fired: !violations.is_empty(),
        violations,
        non_finite,
        margin: m3,
    };
    let normalized = GateScores {
        gate1: live.then_some(n1),
        gate2: live.then_some(n2),
        gate3: n3,
    };
    AnomalyVerdict {
        t,
        anomaly: gate1.fired || gate2.fired || gate3.fired,
        gate1,
        gate2,
        gate3,
        live,
        normalized,
        score: normalized.max(),
        nll_per_dim: s.nll_per_dim.clone(),
        nll_mean: s.nll_mean,
        latency_micros: 0.0,
    }
}

fn check_layout<F: Float>(model: &InferenceModel<F>, profile: &CalibrationProfile) -> Result<()> {
    if profile.d_obs() != model.d_obs() {
        return Err(RaptError::Input(format!(
            "profile covers {} dims but the model observes {}",
            profile.d_obs(),
            model.d_obs()
        )));
    }
    Ok(())
}

/// Scores one streamed observation and evaluates all gates. Advances the
/// stream by one step.
pub fn detect<F: Float>(
    model: &InferenceModel<F>,
    profile: &CalibrationProfile,
    state: &mut StreamState<F>,
    obs: &[f64],
    act: Option<&[f64]>,
) -> Result<AnomalyVerdict> {
    check_layout(model, profile)?;
    let start = Instant::now();
    let t = state.step();
    let s = model.score(state, obs, act)?;
    if s.scored && (!s.nll_mean.is_finite() || s.nll_per_dim.iter().any(|v| !v.is_finite())) {
        return Err(RaptError::NonFiniteScore { step: t });
    }
    let mut v = evaluate_gates(profile, t, &s, obs);
    v.latency_micros = start.elapsed().as_secs_f64() * 1e6;
    Ok(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeVerdict {
    pub flagged: bool,
    pub first_detection: Option<usize>,
    /// Max over steps of the normalized gate margin.
    pub score: f64,
    /// Per-gate maxima of the normalized margins.
    pub gate_scores: GateScores,
    pub verdicts: Vec<AnomalyVerdict>,
}

/// Runs [`detect`] over a whole log from a fresh stream.
pub fn detect_episode<F: Float>(
    model: &InferenceModel<F>,
    profile: &CalibrationProfile,
    log: &TrajectoryLog,
) -> Result<EpisodeVerdict> {
    let mut state = model.new_state();
    let verdicts = (0..log.len())
        .map(|t| detect(model, profile, &mut state, log.obs(t), log.action(t)))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(verdicts))
}

pub fn summarize(verdicts: Vec<AnomalyVerdict>) -> EpisodeVerdict {
    let first_detection = verdicts.iter().find(|v| v.anomaly).map(|v| v.t);
    let gate_scores = verdicts
        .iter()
        .map(|v| v.normalized)
        .reduce(|a, b| a.merge(&b))
        .unwrap_or(GateScores {
            gate1: None,
            gate2: None,
            gate3: f64::NEG_INFINITY,
        });
    EpisodeVerdict {
        flagged: first_detection.is_some(),
        first_detection,
        score: gate_scores.max(),
        gate_scores,
        verdicts,
    }
}
