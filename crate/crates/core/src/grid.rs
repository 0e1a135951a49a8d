use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Relative slack allowed when matching a time to a grid point.
const GRID_SNAP_TOL: f64 = 1e-6;

/// A uniform time grid `t_start + i*dt`, `i = 0..=n_steps`.
///
/// Grid times are always reconstructed from the index, never accumulated,
/// so two grids with equal fields produce bit-identical time stamps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t_start: f64,
    pub dt: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(t_start: f64, dt: f64, n_steps: usize) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::InvalidGrid(format!("dt must be positive, got {dt}")));
        }
        if n_steps == 0 {
            return Err(Error::InvalidGrid("n_steps must be at least 1".into()));
        }
        if !t_start.is_finite() {
            return Err(Error::InvalidGrid(format!("t_start must be finite, got {t_start}")));
        }
        Ok(Self { t_start, dt, n_steps })
    }

    /// Grid covering at least `[t_start, t_end]` with the given step.
    pub fn covering(t_start: f64, t_end: f64, dt: f64) -> Result<Self> {
        if !(t_end > t_start) {
            return Err(Error::InvalidGrid(format!(
                "t_end = {t_end} must exceed t_start = {t_start}"
            )));
        }
        let n = ((t_end - t_start) / dt - GRID_SNAP_TOL).ceil() as usize;
        Self::new(t_start, dt, n.max(1))
    }

    pub fn t_end(&self) -> f64 {
        self.time(self.n_steps)
    }

    pub fn n_points(&self) -> usize {
        self.n_steps + 1
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t_start + i as f64 * self.dt
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n_points()).map(|i| self.time(i))
    }

    /// Index of the grid point equal to `t`, or `OffGrid`.
    pub fn index_of(&self, t: f64) -> Result<usize> {
        let x = (t - self.t_start) / self.dt;
        let i = x.round();
        if (x - i).abs() > GRID_SNAP_TOL || i < 0.0 || i > self.n_steps as f64 {
            return Err(Error::OffGrid { t, t_start: self.t_start, dt: self.dt });
        }
        Ok(i as usize)
    }

    /// Number of steps in `span`, or `NonGridShift` if it is not a multiple of dt.
    pub fn steps_in(&self, span: f64) -> Result<i64> {
        let x = span / self.dt;
        let m = x.round();
        if (x - m).abs() > GRID_SNAP_TOL {
            return Err(Error::NonGridShift { shift: span, dt: self.dt });
        }
        Ok(m as i64)
    }

    pub fn contains(&self, t: f64) -> bool {
        self.index_of(t).is_ok()
    }
}
