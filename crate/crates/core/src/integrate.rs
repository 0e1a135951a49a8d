//! Pathwise forward integration of the SDE: Heun (Stratonovich midpoint),
//! Ito-corrected Euler-Maruyama, and the variation-of-constants semiflow.

use crate::cocycle::{propagator, LinearModel};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::models::{AdditiveNoise, PeriodicField};
use crate::paths::BrownianPath;
use nalgebra::DVector;
use std::io::Write;

/// Blowup guard: beyond this magnitude the expanding direction has won.
pub const NONFINITE_LIMIT: f64 = 1e12;

/// States on the grid `[s, t]`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub grid: TimeGrid,
    pub states: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn last(&self) -> &DVector<f64> {
        self.states.last().expect("trajectory has at least the initial state")
    }

    /// CSV export with header `t,y1,...,yd`.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        let d = self.states.first().map_or(0, |x| x.len());
        write!(out, "t")?;
        for c in 1..=d {
            write!(out, ",y{c}")?;
        }
        writeln!(out)?;
        for (i, x) in self.states.iter().enumerate() {
            write!(out, "{}", crate::export::fmt_g17(self.grid.time(i)))?;
            for c in 0..d {
                write!(out, ",{}", crate::export::fmt_g17(x[c]))?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

fn check_finite(x: &DVector<f64>, t: f64) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) || x.norm() > NONFINITE_LIMIT {
        return Err(Error::NonFinite { t });
    }
    Ok(())
}

fn window(path: &BrownianPath, s: f64, t: f64) -> Result<(usize, usize)> {
    let i = path.grid.index_of(s)?;
    let j = path.grid.index_of(t)?;
    if j < i {
        return Err(Error::OffGrid { t, t_start: s, dt: path.grid.dt });
    }
    Ok((i, j))
}

/// Drift A x + F(t, x).
fn drift(
    model: &LinearModel,
    field: Option<&PeriodicField>,
    t: f64,
    x: &DVector<f64>,
) -> DVector<f64> {
    let mut v = &model.a * x;
    if let Some(f) = field {
        v += f.eval(t, x);
    }
    v
}

/// Predictor-corrector Stratonovich (Heun) integration of
/// `dx = (A x + F(t,x)) dt + sum_k B_k x o dW^k + sum_k beta_k(t) dW^k`
/// on the path grid from s to t. The predictor is the Euler step with the
/// full drift and diffusion; the corrector averages drift and multiplicative
/// diffusion at both ends; additive terms enter at the left point.
pub fn heun_stratonovich(
    model: &LinearModel,
    field: Option<&PeriodicField>,
    beta: Option<&AdditiveNoise>,
    path: &BrownianPath,
    x0: &DVector<f64>,
    s: f64,
    t: f64,
) -> Result<Trajectory> {
    let (i0, i1) = window(path, s, t)?;
    let h = path.grid.dt;
    let mut states = Vec::with_capacity(i1 - i0 + 1);
    let mut x = x0.clone();
    check_finite(&x, s)?;
    states.push(x.clone());
    for i in i0..i1 {
        let tj = path.grid.time(i);
        let dw = path.increment_by_index(i, i + 1);
        let mut add = DVector::zeros(x.len());
        if let Some(b) = beta {
            for (k, bk) in b.eval(tj).into_iter().enumerate() {
                add += bk * dw[k];
            }
        }
        let drift0 = drift(model, field, tj, &x);
        let mut diff0 = DVector::zeros(x.len());
        for (k, bk) in model.b.iter().enumerate() {
            diff0 += bk * &x * dw[k];
        }
        let pred = &x + &drift0 * h + &diff0 + &add;
        let drift1 = drift(model, field, tj + h, &pred);
        let mut diff1 = DVector::zeros(x.len());
        for (k, bk) in model.b.iter().enumerate() {
            diff1 += bk * &pred * dw[k];
        }
        x += (drift0 + drift1) * (0.5 * h) + (diff0 + diff1) * 0.5 + add;
        check_finite(&x, tj + h)?;
        states.push(x.clone());
    }
    let grid = TimeGrid::new(s, h, (i1 - i0).max(1))?;
    Ok(Trajectory { grid, states })
}

/// Euler-Maruyama for the Ito form: the Stratonovich drift is corrected by
/// `+ 1/2 sum_k B_k^2 x` (no correction for the additive terms).
pub fn euler_maruyama_ito(
    model: &LinearModel,
    field: Option<&PeriodicField>,
    beta: Option<&AdditiveNoise>,
    path: &BrownianPath,
    x0: &DVector<f64>,
    s: f64,
    t: f64,
) -> Result<Trajectory> {
    let (i0, i1) = window(path, s, t)?;
    let h = path.grid.dt;
    let correction = model
        .b
        .iter()
        .fold(nalgebra::DMatrix::<f64>::zeros(model.dim(), model.dim()), |acc, bk| acc + bk * bk * 0.5);
    let mut states = Vec::with_capacity(i1 - i0 + 1);
    let mut x = x0.clone();
    check_finite(&x, s)?;
    states.push(x.clone());
    for i in i0..i1 {
        let tj = path.grid.time(i);
        let dw = path.increment_by_index(i, i + 1);
        let mut step = (drift(model, field, tj, &x) + &correction * &x) * h;
        for (k, bk) in model.b.iter().enumerate() {
            step += bk * &x * dw[k];
        }
        if let Some(b) = beta {
            for (k, bk) in b.eval(tj).into_iter().enumerate() {
                step += bk * dw[k];
            }
        }
        x += step;
        check_finite(&x, tj + h)?;
        states.push(x.clone());
    }
    let grid = TimeGrid::new(s, h, (i1 - i0).max(1))?;
    Ok(Trajectory { grid, states })
}

/// Variation-of-constants propagation: between grid nodes the state is pushed
/// by the exact one-step cocycle matrix and the drift integral is corrected by
/// the trapezoid rule; additive terms enter at the left point under the
/// one-step propagator. Agrees with `heun_stratonovich` as dt -> 0 and is
/// exact for F = 0, beta = 0.
#[allow(clippy::too_many_arguments)]
pub fn semiflow(
    model: &LinearModel,
    field: Option<&PeriodicField>,
    beta: Option<&AdditiveNoise>,
    path: &BrownianPath,
    x: &DVector<f64>,
    s: f64,
    t: f64,
    substeps: usize,
) -> Result<DVector<f64>> {
    let (i0, i1) = window(path, s, t)?;
    let h = path.grid.dt;
    let mut u = x.clone();
    check_finite(&u, s)?;
    let _ = substeps; // one-step propagators already use the exact cocycle
    for i in i0..i1 {
        let tj = path.grid.time(i);
        let step = propagator(model, path, h, tj)?;
        let mut next = &step * &u;
        if let Some(f) = field {
            let f0 = f.eval(tj, &u);
            let pred = &next + &step * &f0 * h;
            let f1 = f.eval(tj + h, &pred);
            next += (&step * f0 + f1) * (0.5 * h);
        }
        if let Some(b) = beta {
            let dw = path.increment_by_index(i, i + 1);
            for (k, bk) in b.eval(tj).into_iter().enumerate() {
                next += &step * (bk * dw[k]);
            }
        }
        u = next;
        check_finite(&u, tj + h)?;
    }
    Ok(u)
}
