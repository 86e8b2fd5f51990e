use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::world::{Episode, TimeWarp, World};
use crate::error::{RaptError, Result};
use crate::trajectory::TrajectoryLog;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    SensorFreeze,
    SensorBias,
    NoiseBurst,
    Dropout,
    TimeDelay,
    GainChange,
    DynamicsShift,
    ImpulsePush,
}

impl FaultKind {
    pub const ALL: [FaultKind; 8] = [
        FaultKind::SensorFreeze,
        FaultKind::SensorBias,
        FaultKind::NoiseBurst,
        FaultKind::Dropout,
        FaultKind::TimeDelay,
        FaultKind::GainChange,
        FaultKind::DynamicsShift,
        FaultKind::ImpulsePush,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FaultKind::SensorFreeze => "sensor_freeze",
            FaultKind::SensorBias => "sensor_bias",
            FaultKind::NoiseBurst => "noise_burst",
            FaultKind::Dropout => "dropout",
            FaultKind::TimeDelay => "time_delay",
            FaultKind::GainChange => "gain_change",
            FaultKind::DynamicsShift => "dynamics_shift",
            FaultKind::ImpulsePush => "impulse_push",
        }
    }

    /// Faults that act on a single sensor channel.
    pub fn is_single_channel(self) -> bool {
        !matches!(self, FaultKind::DynamicsShift | FaultKind::ImpulsePush)
    }
}

impl std::fmt::Display for FaultKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    pub kind: FaultKind,
    pub onset: usize,
    pub duration: usize,
    /// Kind-specific: multiples of channel std for bias/noise, steps for
    /// delay, relative change for gain/dynamics, peak amplitude in channel
    /// stds for impulses. Ignored by freeze and dropout.
    pub magnitude: f64,
    pub channels: Vec<usize>,
    /// Seed for stochastic kinds (noise bursts).
    #[serde(default)]
    pub seed: u64,
}

impl FaultSpec {
    pub fn validate(&self, len: usize, d_obs: usize) -> Result<()> {
        if self.duration == 0 || self.onset + self.duration > len {
            return Err(RaptError::Input(format!(
                "fault window [{}, {}) does not fit a {len}-step log",
                self.onset,
                self.onset + self.duration
            )));
        }
        if !(self.magnitude >= 0.0) || !self.magnitude.is_finite() {
            return Err(RaptError::Input(format!("fault magnitude {} must be finite and >= 0", self.magnitude)));
        }
        if self.kind == FaultKind::SensorFreeze && self.onset == 0 {
            return Err(RaptError::Input("sensor_freeze needs a reading before onset".into()));
        }
        if self.channels.is_empty() {
            return Err(RaptError::Input("fault needs at least one channel".into()));
        }
        if let Some(&c) = self.channels.iter().find(|&&c| c >= d_obs) {
            return Err(RaptError::Input(format!("fault channel {c} out of range for d_obs={d_obs}")));
        }
        Ok(())
    }

    pub fn end(&self) -> usize {
        self.onset + self.duration
    }
}

/// Per-step ground truth: true inside `[onset, onset + duration)`.
pub fn fault_labels(len: usize, spec: &FaultSpec) -> Vec<bool> {
    (0..len).map(|t| t >= spec.onset && t < spec.end()).collect()
}

fn channel_std(log: &TrajectoryLog, c: usize) -> f64 {
    let x = log.channel(c);
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt()
}

/// Impulse decay constant in steps.
const IMPULSE_DECAY: f64 = 10.0;

/// Applies a sensor-level fault to a log. `DynamicsShift` changes the
/// underlying motion and needs [`inject_episode_fault`].
pub fn inject_fault(log: &TrajectoryLog, spec: &FaultSpec) -> Result<(TrajectoryLog, Vec<bool>)> {
    spec.validate(log.len(), log.d_obs())?;
    if spec.kind == FaultKind::DynamicsShift {
        return Err(RaptError::Input(
            "dynamics_shift regenerates the episode; use inject_episode_fault".into(),
        ));
    }
    let mut out = log.clone();
    let range = spec.onset..spec.end();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for &c in &spec.channels {
        let std = channel_std(log, c);
        match spec.kind {
            FaultKind::SensorFreeze => {
                // Last reading before the fault.
                let hold = log.obs(spec.onset - 1)[c];
                range.clone().for_each(|t| out.obs_mut(t)[c] = hold);
            }
            FaultKind::SensorBias => {
                range.clone().for_each(|t| out.obs_mut(t)[c] += spec.magnitude * std);
            }
            FaultKind::NoiseBurst => {
                for t in range.clone() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    out.obs_mut(t)[c] += spec.magnitude * std * z;
                }
            }
            FaultKind::Dropout => range.clone().for_each(|t| out.obs_mut(t)[c] = 0.0),
            FaultKind::TimeDelay => {
                let lag = spec.magnitude.round() as usize;
                for t in range.clone() {
                    out.obs_mut(t)[c] = log.obs(t.saturating_sub(lag))[c];
                }
            }
            FaultKind::GainChange => {
                range.clone().for_each(|t| out.obs_mut(t)[c] *= 1.0 + spec.magnitude);
            }
            FaultKind::ImpulsePush => {
                for t in range.clone() {
                    let k = (t - spec.onset) as f64;
                    out.obs_mut(t)[c] += spec.magnitude * std * (-k / IMPULSE_DECAY).exp();
                }
            }
            FaultKind::DynamicsShift => unreachable!(),
        }
    }
    Ok((out, fault_labels(log.len(), spec)))
}

/// Fault injection with access to the generating world, which lets
/// `DynamicsShift` regenerate the motion phase-continuously.
pub fn inject_episode_fault(
    world: &World,
    episode: &Episode,
    spec: &FaultSpec,
) -> Result<(TrajectoryLog, Vec<bool>)> {
    if spec.kind != FaultKind::DynamicsShift {
        return inject_fault(&episode.log, spec);
    }
    spec.validate(episode.log.len(), episode.log.d_obs())?;
    let warp = TimeWarp {
        onset: spec.onset,
        duration: spec.duration,
        rate: 1.0 + spec.magnitude,
    };
    let log = world.render(&episode.params, Some(warp));
    Ok((log, fault_labels(episode.log.len(), spec)))
}

/// How a suite draws faults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FaultSuite {
    pub kinds: Vec<FaultKind>,
    pub magnitudes: KindMagnitudes,
    pub duration: usize,
    /// Onsets are drawn uniformly from `[onset_min, episode_len - duration]`.
    pub onset_min: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KindMagnitudes {
    pub sensor_freeze: f64,
    pub sensor_bias: f64,
    pub noise_burst: f64,
    pub dropout: f64,
    pub time_delay: f64,
    pub gain_change: f64,
    pub dynamics_shift: f64,
    pub impulse_push: f64,
}

impl Default for KindMagnitudes {
    fn default() -> Self {
        Self {
            sensor_freeze: 1.0,
            sensor_bias: 5.0,
            noise_burst: 3.0,
            dropout: 1.0,
            time_delay: 10.0,
            gain_change: 0.5,
            dynamics_shift: 0.3,
            impulse_push: 5.0,
        }
    }
}

impl KindMagnitudes {
    pub fn get(&self, k: FaultKind) -> f64 {
        match k {
            FaultKind::SensorFreeze => self.sensor_freeze,
            FaultKind::SensorBias => self.sensor_bias,
            FaultKind::NoiseBurst => self.noise_burst,
            FaultKind::Dropout => self.dropout,
            FaultKind::TimeDelay => self.time_delay,
            FaultKind::GainChange => self.gain_change,
            FaultKind::DynamicsShift => self.dynamics_shift,
            FaultKind::ImpulsePush => self.impulse_push,
        }
    }
}

impl Default for FaultSuite {
    fn default() -> Self {
        Self {
            kinds: FaultKind::ALL.to_vec(),
            magnitudes: KindMagnitudes::default(),
            duration: 100,
            onset_min: 100,
        }
    }
}

impl FaultSuite {
    /// Only the gross sensor faults: freeze, bias, noise burst, dropout.
    pub fn gross() -> Self {
        Self {
            kinds: vec![
                FaultKind::SensorFreeze,
                FaultKind::SensorBias,
                FaultKind::NoiseBurst,
                FaultKind::Dropout,
            ],
            ..Self::default()
        }
    }

    /// `n` fault specs, kinds assigned round-robin, everything else drawn
    /// from `seed`. Empty when the suite has no kinds.
    pub fn draw(&self, world: &World, n: usize, seed: u64) -> Result<Vec<FaultSpec>> {
        let len = world.cfg.episode_len;
        if self.kinds.is_empty() {
            return Ok(Vec::new());
        }
        if self.duration == 0 || self.onset_min == 0 || self.onset_min + self.duration > len {
            return Err(RaptError::Config(format!(
                "fault suite window (onset >= {} >= 1, duration {}) does not fit {len}-step episodes",
                self.onset_min, self.duration
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d_obs = world.cfg.d_obs();
        Ok((0..n)
            .map(|i| {
                let kind = self.kinds[i % self.kinds.len()];
                let onset = rng.random_range(self.onset_min..=len - self.duration);
                let channels = if kind.is_single_channel() {
                    vec![rng.random_range(0..d_obs)]
                } else if kind == FaultKind::ImpulsePush {
                    world.cfg.base_channels().collect()
                } else {
                    (0..d_obs).collect()
                };
                FaultSpec {
                    kind,
                    onset,
                    duration: self.duration,
                    magnitude: self.magnitudes.get(kind),
                    channels,
                    seed: rng.random(),
                }
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::world::WorldConfig;

    fn world() -> World {
        World::new(WorldConfig {
            episode_len: 200,
            ..WorldConfig::default()
        })
        .unwrap()
    }

    fn spec(kind: FaultKind, magnitude: f64, channels: Vec<usize>) -> FaultSpec {
        FaultSpec {
            kind,
            onset: 50,
            duration: 40,
            magnitude,
            channels,
            seed: 1,
        }
    }

    #[test]
    fn freeze_holds_value() {
        let w = world();
        let log = w.episode(0).log;
        let (out, labels) = inject_fault(&log, &spec(FaultKind::SensorFreeze, 1.0, vec![3])).unwrap();
        let held: Vec<f64> = (50..90).map(|t| out.obs(t)[3]).collect();
        assert!(held.iter().all(|&v| v == held[0]));
        assert_eq!(labels.iter().filter(|&&l| l).count(), 40);
        assert!(labels[50] && !labels[49] && !labels[90]);
        assert_eq!(out.obs(90), log.obs(90));
    }

    #[test]
    fn zero_magnitude_is_identity() {
        let log = world().episode(1).log;
        for kind in [FaultKind::SensorBias, FaultKind::NoiseBurst, FaultKind::GainChange] {
            let (out, _) = inject_fault(&log, &spec(kind, 0.0, vec![0, 5])).unwrap();
            assert_eq!(out, log, "{kind}");
        }
    }

    #[test]
    fn dropout_breaks_velocity_identity() {
        let w = World::new(WorldConfig {
            episode_len: 200,
            process_noise: 0.0,
            sensor_noise: 0.0,
            ..WorldConfig::default()
        })
        .unwrap();
        let log = w.episode(2).log;
        let j = w.cfg.d_joints;
        let dt = w.cfg.dt;
        let (out, _) = inject_fault(&log, &spec(FaultKind::Dropout, 1.0, vec![j + 1])).unwrap();
        for t in 1..200 {
            let fd = (out.obs(t)[1] - out.obs(t - 1)[1]) / dt;
            let consistent = out.obs(t)[j + 1] == fd;
            assert_eq!(consistent, !(50..90).contains(&t), "t={t}");
        }
    }

    #[test]
    fn labeled_steps_differ_from_twin() {
        let w = world();
        let ep = w.episode(4);
        let suite = FaultSuite::default();
        for s in suite.draw(&w, 16, 3).unwrap() {
            let (out, labels) = inject_episode_fault(&w, &ep, &s).unwrap();
            for t in 0..ep.log.len() {
                let differs = out.obs(t) != ep.log.obs(t);
                if labels[t] {
                    assert!(differs, "{} t={t}", s.kind);
                } else if t < s.onset {
                    assert!(!differs, "{} changed before onset at {t}", s.kind);
                }
            }
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let log = world().episode(0).log;
        assert!(inject_fault(&log, &spec(FaultKind::Dropout, 1.0, vec![24])).is_err());
        let late = FaultSpec {
            onset: 190,
            ..spec(FaultKind::Dropout, 1.0, vec![0])
        };
        assert!(inject_fault(&log, &late).is_err());
    }

    #[test]
    fn suite_draw_is_seeded() {
        let w = world();
        let a = FaultSuite::default().draw(&w, 8, 1).unwrap();
        assert_eq!(a, FaultSuite::default().draw(&w, 8, 1).unwrap());
        assert_eq!(a.iter().map(|s| s.kind).collect::<Vec<_>>(), FaultKind::ALL.to_vec());
        let empty = FaultSuite {
            kinds: vec![],
            ..FaultSuite::default()
        };
        assert!(empty.draw(&w, 8, 1).unwrap().is_empty());
    }
}
