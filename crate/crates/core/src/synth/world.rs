use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{RaptError, Result};
use crate::trajectory::TrajectoryLog;

/// Synthetic multi-joint world: phase-coupled sinusoidal joints, exact
/// finite-difference velocities and a linearly mixed "base" block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub d_joints: usize,
    pub episode_len: usize,
    pub dt: f64,
    /// Fundamental period in steps; harmonics are integer multiples of it.
    pub period_steps: f64,
    pub harmonics: usize,
    /// Range from which per-joint harmonic amplitudes are drawn.
    pub amplitude_range: [f64; 2],
    /// Std of the AR(1) joint drift innovations.
    pub process_noise: f64,
    pub process_corr: f64,
    /// Std of additive measurement noise on every channel.
    pub sensor_noise: f64,
    /// Emit commanded joint positions as actions.
    pub with_actions: bool,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            d_joints: 8,
            episode_len: 500,
            dt: 0.02,
            period_steps: 50.0,
            harmonics: 2,
            amplitude_range: [0.2, 0.8],
            process_noise: 0.002,
            process_corr: 0.98,
            sensor_noise: 0.005,
            with_actions: false,
            seed: 7,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(RaptError::Config(format!("world: {m}")));
        if self.d_joints == 0 || self.episode_len < 2 || self.harmonics == 0 {
            return fail("d_joints, harmonics must be >= 1 and episode_len >= 2");
        }
        if !(self.dt > 0.0) || !(self.period_steps > 1.0) {
            return fail("dt must be positive and period_steps > 1");
        }
        if !(self.process_noise >= 0.0) || !(self.sensor_noise >= 0.0) {
            return fail("noise levels must be non-negative");
        }
        if !(0.0..1.0).contains(&self.process_corr) {
            return fail("process_corr must be in [0, 1)");
        }
        let [lo, hi] = self.amplitude_range;
        if !(lo > 0.0 && lo <= hi) {
            return fail("amplitude_range must satisfy 0 < lo <= hi");
        }
        Ok(())
    }

    pub fn d_obs(&self) -> usize {
        3 * self.d_joints
    }

    pub fn d_act(&self) -> usize {
        if self.with_actions {
            self.d_joints
        } else {
            0
        }
    }

    /// Channel names in observation order.
    pub fn channel_names(&self) -> Vec<String> {
        let j = self.d_joints;
        (0..j)
            .map(|i| format!("pos_{i}"))
            .chain((0..j).map(|i| format!("vel_{i}")))
            .chain((0..j).map(|i| format!("base_{i}")))
            .collect()
    }

    pub fn position_channels(&self) -> std::ops::Range<usize> {
        0..self.d_joints
    }

    pub fn velocity_channels(&self) -> std::ops::Range<usize> {
        self.d_joints..2 * self.d_joints
    }

    pub fn base_channels(&self) -> std::ops::Range<usize> {
        2 * self.d_joints..3 * self.d_joints
    }
}

/// Randomness that defines one episode, kept so segments can be regenerated.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeParams {
    pub index: u64,
    /// Per-harmonic phase at `t = 0`.
    pub phase0: Vec<f64>,
    noise_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub params: EpisodeParams,
    pub log: TrajectoryLog,
}

/// Maps step index to "effective time" in steps. Identity for nominal runs;
/// faults may speed the underlying motion up over an interval. The change
/// covers the `duration` step increments ending at `onset .. onset+duration`,
/// so the first affected reading is the one at `onset`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct TimeWarp {
    pub onset: usize,
    pub duration: usize,
    pub rate: f64,
}

impl TimeWarp {
    fn eval(&self, t: f64) -> f64 {
        let on = self.onset as f64 - 1.0;
        let end = on + self.duration as f64;
        if t < on {
            t
        } else if t < end {
            on + (t - on) * self.rate
        } else {
            on + (end - on) * self.rate + (t - end)
        }
    }
}

/// The fixed coupling structure of one benchmark world.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub cfg: WorldConfig,
    /// `[joint][harmonic]` amplitudes.
    amplitude: Vec<Vec<f64>>,
    /// `[joint][harmonic]` phase offsets (the phase-coupling matrix).
    coupling: Vec<Vec<f64>>,
    offset: Vec<f64>,
    /// `[base][joint]` mixing matrix.
    mixing: Vec<Vec<f64>>,
}

fn episode_seed(world_seed: u64, index: u64) -> u64 {
    world_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03))
        ^ 0x5851_F42D_4C95_7F2D
}

impl World {
    pub fn new(cfg: WorldConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let j = cfg.d_joints;
        let [lo, hi] = cfg.amplitude_range;
        let amplitude = (0..j)
            .map(|_| {
                (0..cfg.harmonics)
                    .map(|k| rng.random_range(lo..=hi) / (k + 1) as f64)
                    .collect()
            })
            .collect();
        let coupling = (0..j)
            .map(|_| (0..cfg.harmonics).map(|_| rng.random_range(0.0..TAU)).collect())
            .collect();
        let offset = (0..j).map(|_| rng.random_range(-0.5..0.5)).collect();
        let mixing = (0..j)
            .map(|_| (0..j).map(|_| rng.random_range(-1.0..1.0) / (j as f64).sqrt()).collect())
            .collect();
        Ok(Self {
            cfg,
            amplitude,
            coupling,
            offset,
            mixing,
        })
    }

    fn params(&self, index: u64) -> EpisodeParams {
        let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(self.cfg.seed, index));
        EpisodeParams {
            index,
            phase0: (0..self.cfg.harmonics).map(|_| rng.random_range(0.0..TAU)).collect(),
            noise_seed: rng.random(),
        }
    }

    /// Noise-free commanded position of joint `j` at effective time `tau`.
    fn reference(&self, p: &EpisodeParams, j: usize, tau: f64) -> f64 {
        let w = TAU / self.cfg.period_steps;
        let mut q = self.offset[j];
        for k in 0..self.cfg.harmonics {
            let h = (k + 1) as f64;
            q += self.amplitude[j][k] * (h * w * tau + p.phase0[k] + self.coupling[j][k]).sin();
        }
        q
    }

    pub(crate) fn render(&self, p: &EpisodeParams, warp: Option<TimeWarp>) -> TrajectoryLog {
        let c = &self.cfg;
        let j = c.d_joints;
        let n = c.episode_len;
        let mut rng = ChaCha8Rng::seed_from_u64(p.noise_seed);
        let mut gauss = |s: f64| -> f64 {
            let z: f64 = StandardNormal.sample(&mut rng);
            s * z
        };
        // Drift and positions for t = -1 .. n-1.
        let mut drift = vec![0.0; j];
        let mut pos = vec![vec![0.0; j]; n + 1];
        let mut cmd = vec![vec![0.0; j]; n + 1];
        for (row, t) in (-1..n as i64).enumerate() {
            let tau = warp.map_or(t as f64, |w| w.eval(t as f64));
            for q in 0..j {
                drift[q] = c.process_corr * drift[q] + gauss(c.process_noise);
                cmd[row][q] = self.reference(p, q, tau);
                pos[row][q] = cmd[row][q] + drift[q];
            }
        }
        let d_act = c.d_act();
        let mut log = TrajectoryLog::new(c.d_obs(), d_act);
        let mut obs = vec![0.0; c.d_obs()];
        for t in 0..n {
            let (prev, cur) = (&pos[t], &pos[t + 1]);
            for q in 0..j {
                obs[q] = cur[q] + gauss(c.sensor_noise);
                obs[j + q] = (cur[q] - prev[q]) / c.dt + gauss(c.sensor_noise);
            }
            for b in 0..j {
                let mix: f64 = self.mixing[b].iter().zip(cur).map(|(m, q)| m * q).sum();
                obs[2 * j + b] = mix + gauss(c.sensor_noise);
            }
            let act = (d_act > 0).then(|| cmd[t + 1].clone());
            log.push(t as f64 * c.dt, &obs, act.as_deref())
                .expect("generated rows match the configured layout");
        }
        log
    }

    pub fn episode(&self, index: u64) -> Episode {
        let params = self.params(index);
        let log = self.render(&params, None);
        Episode { params, log }
    }

    /// Episodes `first .. first + n`.
    pub fn episodes(&self, first: u64, n: usize) -> Vec<Episode> {
        (0..n as u64).map(|i| self.episode(first + i)).collect()
    }
}

/// Generates `n_episodes` nominal logs (episode indices `0..n`).
pub fn generate_nominal(cfg: &WorldConfig, n_episodes: usize) -> Result<Vec<TrajectoryLog>> {
    if n_episodes == 0 {
        return Err(RaptError::Config("n_episodes must be >= 1".into()));
    }
    let world = World::new(cfg.clone())?;
    Ok(world.episodes(0, n_episodes).into_iter().map(|e| e.log).collect())
}
