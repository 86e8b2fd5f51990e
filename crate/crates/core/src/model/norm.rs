use serde::{Deserialize, Serialize};

use crate::error::{RaptError, Result};
use crate::trajectory::TrajectoryLog;

/// Per-channel standardization of observations followed by actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Channels whose nominal std falls below this are treated as unit-scale.
const MIN_STD: f64 = 1e-8;

impl Normalizer {
    pub fn identity(width: usize) -> Self {
        Self {
            mean: vec![0.0; width],
            std: vec![1.0; width],
        }
    }

    /// Mean and population std over every step of every log, obs then actions.
    pub fn fit(logs: &[TrajectoryLog]) -> Result<Self> {
        let first = logs
            .first()
            .ok_or_else(|| RaptError::Input("cannot fit normalizer on an empty dataset".into()))?;
        let (d_obs, d_act) = (first.d_obs(), first.d_act());
        let width = d_obs + d_act;
        let mut sum = vec![0.0; width];
        let mut count = 0usize;
        for log in logs {
            if log.d_obs() != d_obs || log.d_act() != d_act {
                return Err(RaptError::Input("dataset mixes observation layouts".into()));
            }
            for t in 0..log.len() {
                for (s, v) in sum.iter_mut().zip(row(log, t)) {
                    *s += v;
                }
            }
            count += log.len();
        }
        if count == 0 {
            return Err(RaptError::Input("dataset has no steps".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0.0; width];
        for log in logs {
            for t in 0..log.len() {
                for ((s, v), m) in sq.iter_mut().zip(row(log, t)).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
        }
        let std = sq
            .iter()
            .map(|s| {
                let sd = (s / count as f64).sqrt();
                if sd > MIN_STD {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    /// Normalizes `raw` into `out`, starting at channel `offset`.
    pub fn normalize_into(&self, raw: &[f64], offset: usize, out: &mut [f64]) {
        for (i, (o, r)) in out.iter_mut().zip(raw).enumerate() {
            *o = (r - self.mean[offset + i]) / self.std[offset + i];
        }
    }

    pub fn normalize(&self, raw: &[f64], offset: usize) -> Vec<f64> {
        let mut out = vec![0.0; raw.len()];
        self.normalize_into(raw, offset, &mut out);
        out
    }

    pub fn denormalize(&self, norm: &[f64], offset: usize) -> Vec<f64> {
        norm.iter()
            .enumerate()
            .map(|(i, v)| v * self.std[offset + i] + self.mean[offset + i])
            .collect()
    }
}

fn row(log: &TrajectoryLog, t: usize) -> impl Iterator<Item = f64> + '_ {
    log.obs(t)
        .iter()
        .copied()
        .chain(log.action(t).into_iter().flatten().copied())
}
