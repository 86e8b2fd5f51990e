use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{RaptError, Result};
use crate::trajectory::TrajectoryLog;

/// A contiguous window `[start, start + len)` inside trajectory `traj`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Window {
    pub traj: usize,
    pub start: usize,
}

/// Draws windows uniformly over every valid `(trajectory, start)` pair.
/// Windows never cross trajectory boundaries.
#[derive(Debug, Clone)]
pub struct WindowSampler {
    /// Cumulative count of valid starts, one entry per trajectory.
    cumulative: Vec<usize>,
    window_len: usize,
    batch_size: usize,
    steps_per_epoch: usize,
    rng: ChaCha8Rng,
}

impl WindowSampler {
    /// `window_len` is the number of rows each window needs (unroll length
    /// plus one for next-step targets).
    pub fn new(
        dataset: &[TrajectoryLog],
        window_len: usize,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        if window_len == 0 || batch_size == 0 {
            return Err(RaptError::Config("window length and batch size must be positive".into()));
        }
        if dataset.is_empty() {
            return Err(RaptError::Input("empty training dataset".into()));
        }
        let mut cumulative = Vec::with_capacity(dataset.len());
        let mut acc = 0;
        let mut total_windows = 0;
        for log in dataset {
            if log.len() < window_len {
                return Err(RaptError::TrajectoryTooShort {
                    len: log.len(),
                    required: window_len,
                });
            }
            acc += log.len() - window_len + 1;
            cumulative.push(acc);
            total_windows += log.len() / window_len;
        }
        Ok(Self {
            cumulative,
            window_len,
            batch_size,
            steps_per_epoch: total_windows.div_ceil(batch_size),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    /// `ceil(total_windows / batch_size)` where `total_windows` counts
    /// non-overlapping windows across the dataset.
    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    /// Number of distinct valid windows.
    pub fn valid_windows(&self) -> usize {
        *self.cumulative.last().unwrap_or(&0)
    }

    pub fn sample(&mut self) -> Window {
        let k = self.rng.random_range(0..self.valid_windows());
        let traj = self.cumulative.partition_point(|&c| c <= k);
        let before = if traj == 0 { 0 } else { self.cumulative[traj - 1] };
        Window {
            traj,
            start: k - before,
        }
    }

    pub fn batch(&mut self) -> Vec<Window> {
        (0..self.batch_size).map(|_| self.sample()).collect()
    }

    /// A fresh epoch of `steps_per_epoch` batches.
    pub fn epoch(&mut self) -> Vec<Vec<Window>> {
        (0..self.steps_per_epoch).map(|_| self.batch()).collect()
    }
}

/// One epoch of window batches for `dataset`, deterministic in `seed`.
pub fn make_windows(
    dataset: &[TrajectoryLog],
    window_len: usize,
    batch_size: usize,
    seed: u64,
) -> Result<impl Iterator<Item = Vec<Window>>> {
    let mut s = WindowSampler::new(dataset, window_len, batch_size, seed)?;
    Ok(s.epoch().into_iter())
}
