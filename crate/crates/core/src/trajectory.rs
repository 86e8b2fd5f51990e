use serde::{Deserialize, Serialize};

use crate::error::{RaptError, Result};

/// Time-ordered observations (and optional actions) of one episode, stored
/// row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLog {
    d_obs: usize,
    d_act: usize,
    times: Vec<f64>,
    obs: Vec<f64>,
    actions: Vec<f64>,
}

impl TrajectoryLog {
    pub fn new(d_obs: usize, d_act: usize) -> Self {
        Self {
            d_obs,
            d_act,
            times: Vec::new(),
            obs: Vec::new(),
            actions: Vec::new(),
        }
    }

    /// Builds a log from flat row-major buffers.
    pub fn from_parts(
        d_obs: usize,
        d_act: usize,
        times: Vec<f64>,
        obs: Vec<f64>,
        actions: Vec<f64>,
    ) -> Result<Self> {
        let n = times.len();
        if obs.len() != n * d_obs || actions.len() != n * d_act {
            return Err(RaptError::Input(format!(
                "trajectory buffers do not match {n} steps of {d_obs} obs / {d_act} act"
            )));
        }
        Ok(Self {
            d_obs,
            d_act,
            times,
            obs,
            actions,
        })
    }

    pub fn push(&mut self, t: f64, obs: &[f64], action: Option<&[f64]>) -> Result<()> {
        if obs.len() != self.d_obs {
            return Err(RaptError::Input(format!(
                "observation has {} values, expected {}",
                obs.len(),
                self.d_obs
            )));
        }
        match (action, self.d_act) {
            (None, 0) => {}
            (Some(a), k) if a.len() == k => self.actions.extend_from_slice(a),
            _ => {
                return Err(RaptError::Input(format!(
                    "action does not match action width {}",
                    self.d_act
                )))
            }
        }
        self.times.push(t);
        self.obs.extend_from_slice(obs);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn d_obs(&self) -> usize {
        self.d_obs
    }

    pub fn d_act(&self) -> usize {
        self.d_act
    }

    pub fn has_actions(&self) -> bool {
        self.d_act > 0
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn obs(&self, t: usize) -> &[f64] {
        &self.obs[t * self.d_obs..(t + 1) * self.d_obs]
    }

    pub fn obs_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.obs[t * self.d_obs..(t + 1) * self.d_obs]
    }

    pub fn action(&self, t: usize) -> Option<&[f64]> {
        (self.d_act > 0).then(|| &self.actions[t * self.d_act..(t + 1) * self.d_act])
    }

    pub fn obs_flat(&self) -> &[f64] {
        &self.obs
    }

    pub fn actions_flat(&self) -> &[f64] {
        &self.actions
    }

    /// One observation channel over time.
    pub fn channel(&self, i: usize) -> Vec<f64> {
        (0..self.len()).map(|t| self.obs(t)[i]).collect()
    }

    /// Steps `[start, end)` as a new log.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        let end = end.min(self.len());
        let start = start.min(end);
        Self {
            d_obs: self.d_obs,
            d_act: self.d_act,
            times: self.times[start..end].to_vec(),
            obs: self.obs[start * self.d_obs..end * self.d_obs].to_vec(),
            actions: self.actions[start * self.d_act..end * self.d_act].to_vec(),
        }
    }
}
