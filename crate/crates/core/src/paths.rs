//! Two-sided multi-channel Brownian paths on uniform grids and the
//! measure-preserving shift `theta_s w(t) = w(t + s) - w(s)`.
//!
//! Paths are anchored at zero at their first grid point, so only increments
//! carry meaning. Shifts are restricted to grid multiples, which makes the
//! shift exact on discrete data.

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use std::io::Write;

/// A sampled Brownian path: `channels x (n_steps + 1)` values in units of sqrt(time).
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianPath {
    pub grid: TimeGrid,
    pub channels: usize,
    pub seed: u64,
    /// `values[k][i]` is the k-th channel at grid point i. Freshly sampled
    /// paths are anchored at zero at the first grid point; only increments
    /// carry meaning.
    values: Vec<Vec<f64>>,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic per-channel stream seed. The stream-splitting rule is
/// `splitmix64(splitmix64(seed) ^ (channel + 1))`, so channels are
/// independent and the ensemble is reproducible in any sampling order.
fn channel_seed(seed: u64, channel: usize) -> u64 {
    splitmix64(splitmix64(seed) ^ (channel as u64 + 1))
}

/// Sample a path on `grid` with the given number of channels.
///
/// Increments are i.i.d. N(0, dt) per channel, drawn from a ChaCha stream
/// keyed by (seed, channel) and consumed in step order. The same inputs
/// always produce a bit-identical path.
pub fn sample_path(grid: TimeGrid, channels: usize, seed: u64) -> BrownianPath {
    let sqrt_dt = grid.dt.sqrt();
    let n = grid.n_steps;
    let mut values = Vec::with_capacity(channels);
    for k in 0..channels {
        let mut rng = ChaCha12Rng::seed_from_u64(channel_seed(seed, k));
        let mut w = Vec::with_capacity(n + 1);
        w.push(0.0);
        let mut acc = 0.0;
        for _ in 0..n {
            let z: f64 = StandardNormal.sample(&mut rng);
            acc += z * sqrt_dt;
            w.push(acc);
        }
        values.push(w);
    }
    BrownianPath { grid, channels, seed, values }
}

impl BrownianPath {
    /// Path with all channels identically zero; useful as the noiseless reference.
    pub fn zero(grid: TimeGrid, channels: usize) -> Self {
        BrownianPath {
            grid,
            channels,
            seed: 0,
            values: vec![vec![0.0; grid.n_points()]; channels],
        }
    }

    /// Wrap existing per-channel values (each `n_points` long, anchored at 0).
    pub fn from_values(grid: TimeGrid, values: Vec<Vec<f64>>, seed: u64) -> Self {
        for v in &values {
            assert_eq!(v.len(), grid.n_points(), "channel length must match the grid");
        }
        let channels = values.len();
        BrownianPath { grid, channels, seed, values }
    }

    pub fn value(&self, channel: usize, index: usize) -> f64 {
        self.values[channel][index]
    }

    pub fn channel(&self, channel: usize) -> &[f64] {
        &self.values[channel]
    }

    /// `W^k(t) - W^k(s)` for grid points `s <= t`, one entry per channel.
    pub fn increment(&self, s: f64, t: f64) -> Result<Vec<f64>> {
        let i = self.grid.index_of(s)?;
        let j = self.grid.index_of(t)?;
        if j < i {
            return Err(Error::OffGrid { t, t_start: s, dt: self.grid.dt });
        }
        Ok(self.increment_by_index(i, j))
    }

    pub fn increment_by_index(&self, i: usize, j: usize) -> Vec<f64> {
        (0..self.channels).map(|k| self.values[k][j] - self.values[k][i]).collect()
    }

    /// The shifted path `theta_s w`, restricted to the overlap of the sampled
    /// window with its shift.
    ///
    /// For `s >= 0` the result covers `[t_start, t_end - s]`; for `s < 0` it
    /// covers `[t_start + |s|, t_end]`. The stored values are the raw source
    /// values at the translated indices (the anchor is a constant offset that
    /// increments never see), so increments of the shifted path are
    /// bit-identical to the original increments at translated times.
    pub fn shift(&self, s: f64) -> Result<BrownianPath> {
        let m = self.grid.steps_in(s)?;
        let n = self.grid.n_steps as i64;
        if m.abs() >= n {
            return Err(Error::WindowExceeded {
                shift: s,
                t_start: self.grid.t_start,
                t_end: self.grid.t_end(),
            });
        }
        if m == 0 {
            return Ok(self.clone());
        }
        let (t_start, n_new, offset) = if m > 0 {
            (self.grid.t_start, (n - m) as usize, m as usize)
        } else {
            (self.grid.t_start + (-m) as f64 * self.grid.dt, (n + m) as usize, 0usize)
        };
        let grid = TimeGrid::new(t_start, self.grid.dt, n_new)?;
        let mut values = Vec::with_capacity(self.channels);
        for k in 0..self.channels {
            let src = &self.values[k];
            values.push(src[offset..=offset + n_new].to_vec());
        }
        Ok(BrownianPath { grid, channels: self.channels, seed: self.seed, values })
    }

    /// Coarsen the grid by an integer factor, keeping every factor-th value.
    /// The coarse path carries the same Brownian increments aggregated over
    /// larger steps; used by strong-convergence studies.
    pub fn coarsen(&self, factor: usize) -> Result<BrownianPath> {
        if factor == 0 || self.grid.n_steps % factor != 0 {
            return Err(Error::InvalidGrid(format!(
                "coarsening factor {factor} does not divide n_steps = {}",
                self.grid.n_steps
            )));
        }
        let n_new = self.grid.n_steps / factor;
        let grid = TimeGrid::new(self.grid.t_start, self.grid.dt * factor as f64, n_new)?;
        let values = (0..self.channels)
            .map(|k| (0..=n_new).map(|i| self.values[k][i * factor]).collect())
            .collect();
        Ok(BrownianPath { grid, channels: self.channels, seed: self.seed, values })
    }

    /// CSV export with header `t,W1,...,WM` at full double precision.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        write!(out, "t")?;
        for k in 1..=self.channels {
            write!(out, ",W{k}")?;
        }
        writeln!(out)?;
        for i in 0..self.grid.n_points() {
            write!(out, "{}", crate::export::fmt_g17(self.grid.time(i)))?;
            for k in 0..self.channels {
                write!(out, ",{}", crate::export::fmt_g17(self.values[k][i]))?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}
