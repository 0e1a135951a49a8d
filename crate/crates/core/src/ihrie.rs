//! Discretization and damped fixed-point solution of the coupled
//! forward-backward infinite-horizon random integral equation
//!
//! ```text
//! Y(t) =  int_{-inf}^t  Phi(t-s, theta_s w) P^- F(s, Y(s)) ds
//!       - int_t^{+inf}  Phi(t-s, theta_s w) P^+ F(s, Y(s)) ds
//!       (+ the analogous Wiener sums against beta_k dW)
//! ```
//!
//! on the extended window `[-T-H, T+H]`. Infinite horizons are truncated at H
//! with an exponential-tail error estimate; only `[-T, T]` is reported.

use crate::cocycle::{
    build_dichotomy, cocycle_factors, sequential_factors, temperedness_stat_windowed, Dichotomy,
    LinearModel, TruncationSign,
};
use crate::error::{Error, Result};
use crate::expm::expm;
use crate::grid::TimeGrid;
use crate::integrate::heun_stratonovich;
use crate::models::{AdditiveNoise, PeriodicField};
use crate::paths::BrownianPath;
use nalgebra::{DMatrix, DVector};
use rustfft::{num_complex::Complex, Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use std::cell::RefCell;
use std::collections::HashMap;
use std::io::Write;
use std::sync::Arc;

thread_local! {
    static FFT_PLANS: RefCell<HashMap<usize, (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>)>> =
        RefCell::new(HashMap::new());
}

fn fft_pair(len: usize) -> (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>) {
    FFT_PLANS.with(|cache| {
        cache
            .borrow_mut()
            .entry(len)
            .or_insert_with(|| {
                let mut planner = FftPlanner::<f64>::new();
                (planner.plan_fft_forward(len), planner.plan_fft_inverse(len))
            })
            .clone()
    })
}

/// A candidate random periodic path evaluated on a grid for one fixed path.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    pub grid: TimeGrid,
    pub dim: usize,
    /// Point-major layout: `data[i * dim + c]`.
    pub data: Vec<f64>,
}

impl GridFunction {
    pub fn zeros(grid: TimeGrid, dim: usize) -> Self {
        GridFunction { grid, dim, data: vec![0.0; grid.n_points() * dim] }
    }

    pub fn value(&self, i: usize) -> DVector<f64> {
        DVector::from_column_slice(&self.data[i * self.dim..(i + 1) * self.dim])
    }

    pub fn component(&self, i: usize, c: usize) -> f64 {
        self.data[i * self.dim + c]
    }

    pub fn at_time(&self, t: f64) -> Result<DVector<f64>> {
        Ok(self.value(self.grid.index_of(t)?))
    }

    /// `max_i e^{-2 Lambda |t_i|} |Y(t_i)|_2`.
    pub fn weighted_sup_norm(&self, lambda: f64) -> f64 {
        weighted_sup_norm(self, lambda)
    }

    pub fn restrict(&self, lo: usize, hi: usize) -> GridFunction {
        let grid = TimeGrid::new(self.grid.time(lo), self.grid.dt, hi - lo).expect("valid window");
        GridFunction { grid, dim: self.dim, data: self.data[lo * self.dim..(hi + 1) * self.dim].to_vec() }
    }

    /// CSV export with header `t,y1,...,yd`.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        write!(out, "t")?;
        for c in 1..=self.dim {
            write!(out, ",y{c}")?;
        }
        writeln!(out)?;
        for i in 0..self.grid.n_points() {
            write!(out, "{}", crate::export::fmt_g17(self.grid.time(i)))?;
            for c in 0..self.dim {
                write!(out, ",{}", crate::export::fmt_g17(self.component(i, c)))?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Pathwise discrete analogue of the weighted norm: `sup_t e^{-2 Lambda |t|} |Y(t)|`.
pub fn weighted_sup_norm(y: &GridFunction, lambda: f64) -> f64 {
    let mut best = 0.0f64;
    for i in 0..y.grid.n_points() {
        let w = (-2.0 * lambda * y.grid.time(i).abs()).exp();
        let mut nsq = 0.0;
        for c in 0..y.dim {
            let v = y.component(i, c);
            nsq += v * v;
        }
        best = best.max(w * nsq.sqrt());
    }
    best
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Core half-window T: the solution is reported on [-T, T].
    pub t_core: f64,
    /// Integration horizon H; the iteration domain is [-T-H, T+H].
    pub horizon: f64,
    pub dt: f64,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    /// Damping alpha in (0, 1]; None picks min(1, gap / (2 lip)).
    #[serde(default)]
    pub damping: Option<f64>,
    /// Weight Lambda; None picks gap / 8.
    #[serde(default)]
    pub lambda: Option<f64>,
    /// Truncation level N; None selects it from the tempered statistic.
    #[serde(default)]
    pub truncation: Option<usize>,
    /// Anderson mixing depth (0 disables acceleration).
    #[serde(default)]
    pub anderson_depth: usize,
}

fn default_tol() -> f64 {
    1e-8
}

fn default_max_iter() -> usize {
    200
}

impl SolverConfig {
    pub fn new(t_core: f64, horizon: f64, dt: f64) -> Self {
        SolverConfig {
            t_core,
            horizon,
            dt,
            tol: default_tol(),
            max_iter: default_max_iter(),
            damping: None,
            lambda: None,
            truncation: None,
            anderson_depth: 0,
        }
    }

    /// Default horizon for a target tolerance: `(8 / gap) log(10 / tol)`.
    pub fn default_horizon(gap: f64, tol: f64) -> f64 {
        (8.0 / gap) * (10.0 / tol).ln()
    }

    /// dt snapped so that tau / dt is an integer.
    pub fn snapped_dt(&self, tau: f64) -> f64 {
        let k = (tau / self.dt).round().max(1.0);
        tau / k
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub residuals: Vec<f64>,
    pub final_residual: f64,
    /// Truncation level; reported as a float because the pathwise tempered
    /// statistic can be astronomically large for strong multiplicative noise.
    #[serde(rename = "N")]
    pub n_level: f64,
    pub edge_error: f64,
    #[serde(rename = "H")]
    pub h: f64,
    pub dt: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub converged: bool,
    pub wall_time_s: f64,
    pub warnings: Vec<String>,
}

/// Kernel evaluation strategy for the quadratures.
enum KernelPlan {
    /// All B_k = 0: the kernel depends on the lag only and the heavy window
    /// sums become discrete convolutions evaluated by FFT.
    Lag {
        /// `k_minus[lag]` = flattened `e^{A lag dt} P^-` (row-major d x d).
        k_minus: Vec<f64>,
        /// `k_plus[lag]` = flattened `e^{-A lag dt} P^+`.
        k_plus: Vec<f64>,
    },
    /// Commutative factorization `Phi(t_i - t_j, theta_{t_j} w) = g[i] g_inv[j]`
    /// (sequential Heun products for one-sided non-commutative models).
    Factored {
        g: Vec<f64>,
        /// `g_inv[j] P^-` and `g_inv[j] P^+`, flattened.
        gp_minus: Vec<f64>,
        gp_plus: Vec<f64>,
        /// Per channel: `exp{-A t_j - B_k V_k[j+1] - sum_{l != k} B_l V_l[j]}`,
        /// the Skorohod-excluded inverse factor for forward stochastic sums.
        h_minus: Vec<Vec<f64>>,
    },
}

/// The assembled solver for one path: grids, dichotomy, kernel plan and the
/// cached (iterate-independent) stochastic term.
pub struct IhrieSolver<'a> {
    pub model: &'a LinearModel,
    pub field: &'a PeriodicField,
    pub beta: Option<&'a AdditiveNoise>,
    pub path: &'a BrownianPath,
    pub dichotomy: Dichotomy,
    pub grid: TimeGrid,
    /// Offset of the solver grid inside the path grid.
    offset: usize,
    /// Horizon in steps.
    m_steps: usize,
    /// Core window indices [core_lo, core_hi].
    core_lo: usize,
    core_hi: usize,
    pub n_level: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub tol: f64,
    pub max_iter: usize,
    anderson_depth: usize,
    truncation_transparent: bool,
    plan: KernelPlan,
    stochastic: Option<GridFunction>,
    pub warnings: Vec<String>,
    pub edge_error: f64,
    have_minus: bool,
    have_plus: bool,
}

fn flatten(m: &DMatrix<f64>) -> Vec<f64> {
    let d = m.nrows();
    let mut out = vec![0.0; d * d];
    for r in 0..d {
        for c in 0..d {
            out[r * d + c] = m[(r, c)];
        }
    }
    out
}

/// `out += w * (M v)` for a flattened row-major d x d block.
#[inline]
fn matvec_acc(mat: &[f64], v: &[f64], d: usize, w: f64, out: &mut [f64]) {
    for r in 0..d {
        let row = &mat[r * d..(r + 1) * d];
        let mut acc = 0.0;
        for c in 0..d {
            acc += row[c] * v[c];
        }
        out[r] += w * acc;
    }
}

/// Trapezoid-weighted window sum of point-major q over indices [lo, hi]:
/// `dt (sum q_j - q_lo / 2 - q_hi / 2)`, written into `out`.
#[inline]
fn trapezoid_window(q: &[f64], d: usize, lo: usize, hi: usize, dt: f64, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = 0.0;
    }
    if hi <= lo {
        return;
    }
    if d == 1 {
        let mut acc = 0.0;
        for &v in &q[lo..=hi] {
            acc += v;
        }
        out[0] = dt * (acc - 0.5 * (q[lo] + q[hi]));
        return;
    }
    for block in q[lo * d..(hi + 1) * d].chunks_exact(d) {
        for c in 0..d {
            out[c] += block[c];
        }
    }
    for c in 0..d {
        out[c] -= 0.5 * (q[lo * d + c] + q[hi * d + c]);
        out[c] *= dt;
    }
}

/// Plain window sum over [lo, hi] (stochastic left-point sums).
#[inline]
fn window_sum(q: &[f64], d: usize, lo: usize, hi_incl: usize, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = 0.0;
    }
    if hi_incl < lo {
        return;
    }
    if d == 1 {
        let mut acc = 0.0;
        for &v in &q[lo..=hi_incl] {
            acc += v;
        }
        out[0] = acc;
        return;
    }
    for block in q[lo * d..(hi_incl + 1) * d].chunks_exact(d) {
        for c in 0..d {
            out[c] += block[c];
        }
    }
}

impl<'a> IhrieSolver<'a> {
    pub fn new(
        model: &'a LinearModel,
        field: &'a PeriodicField,
        beta: Option<&'a AdditiveNoise>,
        path: &'a BrownianPath,
        cfg: &SolverConfig,
    ) -> Result<Self> {
        let d = model.dim();
        if field.dim != d {
            return Err(Error::DimensionMismatch(format!(
                "field dimension {} != model dimension {d}",
                field.dim
            )));
        }
        if let Some(b) = beta {
            if b.dim != d {
                return Err(Error::DimensionMismatch(format!(
                    "beta dimension {} != model dimension {d}",
                    b.dim
                )));
            }
            if (b.tau - field.tau).abs() > 1e-9 * field.tau {
                return Err(Error::Config(format!(
                    "field period {} and beta period {} disagree",
                    field.tau, b.tau
                )));
            }
        }
        let channels = model.channels().max(beta.map_or(0, |b| b.channels));
        if path.channels < channels {
            return Err(Error::DimensionMismatch(format!(
                "path has {} channels, model/beta need {channels}",
                path.channels
            )));
        }

        let tau = field.tau;
        let dt = cfg.snapped_dt(tau);
        if (path.grid.dt - dt).abs() > 1e-9 * dt {
            return Err(Error::Config(format!(
                "path dt {} does not match the snapped solver dt {dt}",
                path.grid.dt
            )));
        }
        let k_t = (cfg.t_core / dt).ceil().max(1.0) as usize;
        let m_steps = (cfg.horizon / dt).ceil().max(1.0) as usize;
        let n_steps = 2 * (k_t + m_steps);
        let t_start = -((k_t + m_steps) as f64) * dt;
        let grid = TimeGrid::new(t_start, dt, n_steps)?;
        let offset = path.grid.index_of(t_start).map_err(|_| {
            Error::Config(format!(
                "path window [{}, {}] does not cover the extended window [{t_start}, {}]",
                path.grid.t_start,
                path.grid.t_end(),
                -t_start
            ))
        })?;
        if offset + n_steps > path.grid.n_steps {
            return Err(Error::Config(format!(
                "path window [{}, {}] too short for the extended window [{t_start}, {}]",
                path.grid.t_start,
                path.grid.t_end(),
                -t_start
            )));
        }

        let dichotomy = build_dichotomy(model, None, cfg.lambda)?;
        crate::cocycle::require_projectable(model, &dichotomy)?;
        let lambda = dichotomy.lambda;
        let gap = dichotomy.gap;

        let mut warnings = Vec::new();
        let (sup_f, lip_f) = field.bounds_or_estimate();
        let h_actual = m_steps as f64 * dt;
        let h_floor = (4.0 / gap) * (sup_f.max(1.0) / cfg.tol).ln();
        if h_actual < h_floor {
            warnings.push(format!(
                "horizon H = {h_actual:.3} is below the heuristic floor {h_floor:.3} for tol {:.1e}",
                cfg.tol
            ));
        }

        let alpha = cfg.damping.unwrap_or_else(|| {
            if lip_f <= 0.0 {
                1.0
            } else {
                (gap / (2.0 * lip_f)).min(1.0)
            }
        });
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::Config(format!("damping alpha = {alpha} outside (0, 1]")));
        }

        // Sub-path restricted to the solver window so the kernel plan and the
        // tempered statistic see only solver-grid data.
        let have_minus = dichotomy.p_minus.norm() > 0.0;
        let have_plus = dichotomy.p_plus.norm() > 0.0;

        let (plan, stat) = build_plan(model, &dichotomy, path, offset, &grid, m_steps)?;
        let n_level = match cfg.truncation {
            Some(n) => n as f64,
            None => (stat * (1.0 + 1e-9)).ceil().max(1.0),
        };
        let truncation_transparent = n_level >= stat;

        let rm = dichotomy.rate_minus();
        let rp = dichotomy.rate_plus();
        let mut edge_error = 0.0f64;
        if have_minus {
            edge_error = edge_error
                .max(sup_f * n_level * (0.5 * rm * h_actual).exp() * 2.0 / (rm + 2.0 * lambda).abs());
        }
        if have_plus {
            edge_error = edge_error
                .max(sup_f * n_level * (-0.5 * rp * h_actual).exp() * 2.0 / (rp - 2.0 * lambda).abs());
        }

        let core_lo = m_steps;
        let core_hi = m_steps + 2 * k_t;

        let mut solver = IhrieSolver {
            model,
            field,
            beta,
            path,
            dichotomy,
            grid,
            offset,
            m_steps,
            core_lo,
            core_hi,
            n_level,
            alpha,
            lambda,
            tol: cfg.tol,
            max_iter: cfg.max_iter,
            anderson_depth: cfg.anderson_depth,
            truncation_transparent,
            plan,
            stochastic: None,
            warnings,
            edge_error,
            have_minus,
            have_plus,
        };
        if beta.is_some() {
            solver.stochastic = Some(solver.stochastic_term());
        }
        Ok(solver)
    }

    pub fn horizon_steps(&self) -> usize {
        self.m_steps
    }

    pub fn core_window(&self) -> (usize, usize) {
        (self.core_lo, self.core_hi)
    }

    /// Output points whose quadrature horizon is clipped by the window edge.
    pub fn clipped_mask(&self) -> Vec<bool> {
        let n = self.grid.n_points();
        (0..n).map(|i| i < self.m_steps || i + self.m_steps > n - 1).collect()
    }

    fn path_value(&self, channel: usize, i: usize) -> f64 {
        self.path.value(channel, self.offset + i)
    }

    /// F(s_j, Y_j) for all grid points, point-major.
    fn eval_field(&self, y: &GridFunction) -> Vec<f64> {
        let d = self.model.dim();
        let n = self.grid.n_points();
        let mut out = vec![0.0; n * d];
        for j in 0..n {
            let t = self.grid.time(j);
            let f = self.field.eval(t, &y.value(j));
            out[j * d..(j + 1) * d].copy_from_slice(f.as_slice());
        }
        out
    }

    /// The deterministic map `M(Y)`: forward stable and backward unstable
    /// trapezoid quadratures over clipped horizons.
    pub fn apply_m(&self, y: &GridFunction) -> GridFunction {
        let fvals = self.eval_field(y);
        if self.truncation_transparent {
            self.apply_m_fast(&fvals)
        } else {
            self.apply_m_truncated(&fvals)
        }
    }

    /// `M(Y)` with the truncation factors evaluated pair by pair, regardless
    /// of whether the selected N makes them transparent. Slow; used to check
    /// that the fast route and the literal truncated quadrature agree.
    pub fn apply_m_truncated_for_tests(&self, y: &GridFunction) -> GridFunction {
        let fvals = self.eval_field(y);
        self.apply_m_truncated(&fvals)
    }

    /// `M(Y)` plus the cached additive Wiener sums.
    pub fn apply_m_additive(&self, y: &GridFunction) -> GridFunction {
        let mut out = self.apply_m(y);
        if let Some(st) = &self.stochastic {
            for (o, s) in out.data.iter_mut().zip(st.data.iter()) {
                *o += s;
            }
        }
        out
    }

    fn apply_m_fast(&self, fvals: &[f64]) -> GridFunction {
        let d = self.model.dim();
        let n = self.grid.n_points();
        let m = self.m_steps;
        let dt = self.grid.dt;
        let mut out = GridFunction::zeros(self.grid, d);
        match &self.plan {
            KernelPlan::Lag { k_minus, k_plus } => {
                if self.have_minus {
                    let conv = fft_lag_conv(k_minus, fvals, d, n, m, false);
                    for i in 0..n {
                        let lag_end = m.min(i);
                        let lo = i - lag_end;
                        let block = &mut out.data[i * d..(i + 1) * d];
                        for c in 0..d {
                            block[c] += dt * conv[i * d + c];
                        }
                        matvec_acc(&k_minus[0..d * d], &fvals[i * d..(i + 1) * d], d, -0.5 * dt, block);
                        matvec_acc(
                            &k_minus[lag_end * d * d..(lag_end + 1) * d * d],
                            &fvals[lo * d..(lo + 1) * d],
                            d,
                            -0.5 * dt,
                            block,
                        );
                    }
                }
                if self.have_plus {
                    let corr = fft_lag_conv(k_plus, fvals, d, n, m, true);
                    for i in 0..n {
                        let lag_end = m.min(n - 1 - i);
                        let hi = i + lag_end;
                        let block = &mut out.data[i * d..(i + 1) * d];
                        for c in 0..d {
                            block[c] -= dt * corr[i * d + c];
                        }
                        matvec_acc(&k_plus[0..d * d], &fvals[i * d..(i + 1) * d], d, 0.5 * dt, block);
                        matvec_acc(
                            &k_plus[lag_end * d * d..(lag_end + 1) * d * d],
                            &fvals[hi * d..(hi + 1) * d],
                            d,
                            0.5 * dt,
                            block,
                        );
                    }
                }
                out
            }
            KernelPlan::Factored { g, gp_minus, gp_plus, .. } => {
                let mut qm = vec![0.0; n * d];
                let mut qp = vec![0.0; n * d];
                for j in 0..n {
                    let f = &fvals[j * d..(j + 1) * d];
                    if self.have_minus {
                        matvec_acc(&gp_minus[j * d * d..(j + 1) * d * d], f, d, 1.0, &mut qm[j * d..(j + 1) * d]);
                    }
                    if self.have_plus {
                        matvec_acc(&gp_plus[j * d * d..(j + 1) * d * d], f, d, 1.0, &mut qp[j * d..(j + 1) * d]);
                    }
                }
                let mut acc = vec![0.0; d];
                for i in 0..n {
                    let gi = &g[i * d * d..(i + 1) * d * d];
                    let block = &mut out.data[i * d..(i + 1) * d];
                    if self.have_minus {
                        trapezoid_window(&qm, d, i.saturating_sub(m), i, dt, &mut acc);
                        matvec_acc(gi, &acc, d, 1.0, block);
                    }
                    if self.have_plus {
                        trapezoid_window(&qp, d, i, (i + m).min(n - 1), dt, &mut acc);
                        matvec_acc(gi, &acc, d, -1.0, block);
                    }
                }
                out
            }
        }
    }

    /// Per-pair quadrature with the truncation factors active (the slow route
    /// used when the requested N is below the tempered statistic).
    fn apply_m_truncated(&self, fvals: &[f64]) -> GridFunction {
        let d = self.model.dim();
        let n = self.grid.n_points();
        let m = self.m_steps;
        let dt = self.grid.dt;
        let mut out = GridFunction::zeros(self.grid, d);
        let mut kbuf = vec![0.0; d * d];
        for i in 0..n {
            let block_out = &mut out.data[i * d..(i + 1) * d];
            if self.have_minus {
                let lo = i.saturating_sub(m);
                if lo < i {
                    for j in lo..=i {
                        let w = if j == lo || j == i { 0.5 * dt } else { dt };
                        self.kernel_pair(i, j, TruncationSign::Minus, &mut kbuf);
                        matvec_acc(&kbuf, &fvals[j * d..(j + 1) * d], d, w, block_out);
                    }
                }
            }
            if self.have_plus {
                let hi = (i + m).min(n - 1);
                if hi > i {
                    for j in i..=hi {
                        let w = if j == i || j == hi { 0.5 * dt } else { dt };
                        self.kernel_pair(i, j, TruncationSign::Plus, &mut kbuf);
                        matvec_acc(&kbuf, &fvals[j * d..(j + 1) * d], d, -w, block_out);
                    }
                }
            }
        }
        out
    }

    /// `Phi^N(t_i - t_j, theta_{t_j}) P^{-+}` written into `kbuf`.
    fn kernel_pair(&self, i: usize, j: usize, sign: TruncationSign, kbuf: &mut [f64]) {
        let d = self.model.dim();
        let dt = self.grid.dt;
        match &self.plan {
            KernelPlan::Lag { k_minus, k_plus } => {
                let (lag, ker) = match sign {
                    TruncationSign::Minus => (i - j, k_minus),
                    TruncationSign::Plus => (j - i, k_plus),
                };
                kbuf.copy_from_slice(&ker[lag * d * d..(lag + 1) * d * d]);
            }
            KernelPlan::Factored { g, gp_minus, gp_plus, .. } => {
                let gi = &g[i * d * d..(i + 1) * d * d];
                let gp = match sign {
                    TruncationSign::Minus => &gp_minus[j * d * d..(j + 1) * d * d],
                    TruncationSign::Plus => &gp_plus[j * d * d..(j + 1) * d * d],
                };
                for r in 0..d {
                    for c in 0..d {
                        let mut acc = 0.0;
                        for k in 0..d {
                            acc += gi[r * d + k] * gp[k * d + c];
                        }
                        kbuf[r * d + c] = acc;
                    }
                }
            }
        }
        // Truncation factor min{1, N e^{rate u / 2} e^{Lambda |s|} / ||.||_F}.
        let u = (i as f64 - j as f64) * dt;
        let s = self.grid.time(j);
        let rate = match sign {
            TruncationSign::Minus => self.dichotomy.rate_minus(),
            TruncationSign::Plus => self.dichotomy.rate_plus(),
        };
        let env = self.n_level * (0.5 * rate * u + self.lambda * s.abs()).exp();
        let norm: f64 = kbuf.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > env {
            let f = env / norm;
            for v in kbuf.iter_mut() {
                *v *= f;
            }
        }
    }

    /// The additive Wiener sums (iterate-independent): forward sums use the
    /// Skorohod-excluded kernel argument `W_t - W_{s_{j+1}}`, backward kernels
    /// never overlap their own integration increment.
    pub fn stochastic_term(&self) -> GridFunction {
        let d = self.model.dim();
        let n = self.grid.n_points();
        let m = self.m_steps;
        let mut out = GridFunction::zeros(self.grid, d);
        let beta = match self.beta {
            Some(b) => b,
            None => return out,
        };
        // Per-increment integrands: r_minus[j] = sum_k H_k_inv[j] P^- beta_k(s_j) dW_j^k,
        // r_plus[j] = sum_k g_inv[j] P^+ beta_k(s_j) dW_j^k, for j in [0, n-2].
        let n_inc = n - 1;
        let mut r_minus = vec![0.0; n_inc * d];
        let mut r_plus = vec![0.0; n_inc * d];
        match &self.plan {
            KernelPlan::Lag { k_minus, k_plus } => {
                // Deterministic kernels: the lag convolution applies directly to
                // s_j = sum_k beta_k(s_j) dW_j^k (the projector lives in the kernel).
                let mut svals = vec![0.0; n * d];
                for j in 0..n_inc {
                    let t = self.grid.time(j);
                    let bs = beta.eval(t);
                    for (k, bk) in bs.iter().enumerate() {
                        let dw = self.path_value(k, j + 1) - self.path_value(k, j);
                        for c in 0..d {
                            svals[j * d + c] += bk[c] * dw;
                        }
                    }
                }
                if self.have_minus {
                    let conv = fft_lag_conv(k_minus, &svals, d, n, m, false);
                    for i in 0..n {
                        let block = &mut out.data[i * d..(i + 1) * d];
                        for c in 0..d {
                            block[c] += conv[i * d + c];
                        }
                        // Remove the lag-0 term: forward increments run to j = i-1.
                        matvec_acc(&k_minus[0..d * d], &svals[i * d..(i + 1) * d], d, -1.0, block);
                    }
                }
                if self.have_plus {
                    let corr = fft_lag_conv(k_plus, &svals, d, n, m, true);
                    for i in 0..n {
                        let block = &mut out.data[i * d..(i + 1) * d];
                        for c in 0..d {
                            block[c] -= corr[i * d + c];
                        }
                        // Remove the lag-m term when it exists: increments run to i+m-1.
                        if i + m < n {
                            matvec_acc(
                                &k_plus[m * d * d..(m + 1) * d * d],
                                &svals[(i + m) * d..(i + m + 1) * d],
                                d,
                                1.0,
                                block,
                            );
                        }
                    }
                }
                return out;
            }
            KernelPlan::Factored { g, gp_minus, gp_plus, h_minus } => {
                let model_channels = self.model.channels();
                for j in 0..n_inc {
                    let t = self.grid.time(j);
                    let bs = beta.eval(t);
                    for (k, bk) in bs.iter().enumerate() {
                        let dw = self.path_value(k, j + 1) - self.path_value(k, j);
                        if self.have_minus {
                            // Channels without a B_k need no increment exclusion.
                            let hk = if k < model_channels { &h_minus[k] } else { gp_minus };
                            let hk = &hk[j * d * d..(j + 1) * d * d];
                            matvec_acc(hk, bk.as_slice(), d, dw, &mut r_minus[j * d..(j + 1) * d]);
                        }
                        if self.have_plus {
                            let gp = &gp_plus[j * d * d..(j + 1) * d * d];
                            matvec_acc(gp, bk.as_slice(), d, dw, &mut r_plus[j * d..(j + 1) * d]);
                        }
                    }
                }
                let mut acc = vec![0.0; d];
                for i in 0..n {
                    let gi = &g[i * d * d..(i + 1) * d * d];
                    let block = &mut out.data[i * d..(i + 1) * d];
                    if self.have_minus && i > 0 {
                        let lo = i.saturating_sub(m);
                        window_sum(&r_minus, d, lo, i - 1, &mut acc);
                        matvec_acc(gi, &acc, d, 1.0, block);
                    }
                    if self.have_plus && i < n_inc {
                        let hi = (i + m - 1).min(n_inc - 1);
                        window_sum(&r_plus, d, i, hi, &mut acc);
                        matvec_acc(gi, &acc, d, -1.0, block);
                    }
                }
            }
        }
        out
    }

    /// Damped Picard iteration from Y = 0 (optionally Anderson-accelerated),
    /// stopping when the weighted-norm update drops below tol.
    pub fn solve_full(&self) -> Result<(GridFunction, SolveReport)> {
        let start = std::time::Instant::now();
        let d = self.model.dim();
        let mut y = GridFunction::zeros(self.grid, d);
        let mut residuals = Vec::new();
        let mut converged = false;
        let mut anderson = AndersonMixer::new(self.anderson_depth, y.data.len());
        for _ in 0..self.max_iter {
            let m_y = self.apply_m_additive(&y);
            let mut delta = m_y.clone();
            for (dv, yv) in delta.data.iter_mut().zip(y.data.iter()) {
                *dv -= yv;
            }
            let res = self.alpha * weighted_sup_norm(&delta, self.lambda);
            residuals.push(res);
            match anderson.next_iterate(&y.data, &m_y.data, self.alpha) {
                Some(next) => y.data = next,
                None => {
                    for (yv, dv) in y.data.iter_mut().zip(delta.data.iter()) {
                        *yv += self.alpha * dv;
                    }
                }
            }
            if res <= self.tol {
                converged = true;
                break;
            }
        }
        let final_residual = residuals.last().copied().unwrap_or(0.0);
        let report = SolveReport {
            iterations: residuals.len(),
            residuals: residuals.clone(),
            final_residual,
            n_level: self.n_level,
            edge_error: self.edge_error,
            h: self.m_steps as f64 * self.grid.dt,
            dt: self.grid.dt,
            alpha: self.alpha,
            lambda: self.lambda,
            converged,
            wall_time_s: start.elapsed().as_secs_f64(),
            warnings: self.warnings.clone(),
        };
        if !converged {
            return Err(Error::MaxIterExceeded {
                iterations: report.iterations,
                last_residual: final_residual,
                tol: self.tol,
                report: Box::new(report),
            });
        }
        Ok((y, report))
    }

    /// Solve and restrict to the core window [-T, T].
    pub fn solve(&self) -> Result<(GridFunction, SolveReport)> {
        let (y, report) = self.solve_full()?;
        Ok((y.restrict(self.core_lo, self.core_hi), report))
    }
}

/// Build the kernel plan and the windowed tempered statistic.
fn build_plan(
    model: &LinearModel,
    dich: &Dichotomy,
    path: &BrownianPath,
    offset: usize,
    grid: &TimeGrid,
    m_steps: usize,
) -> Result<(KernelPlan, f64)> {
    let d = model.dim();
    let n = grid.n_points();
    // Sub-path sharing the solver grid, used for stat scans and factorization.
    let sub = subpath(path, offset, grid)?;
    let stat = stat_for_solver(model, &sub, dich, m_steps);
    if model.is_deterministic() {
        let step_f = expm(&(&model.a * grid.dt));
        let step_b = expm(&(-&model.a * grid.dt));
        let mut k_minus = Vec::with_capacity((m_steps + 1) * d * d);
        let mut k_plus = Vec::with_capacity((m_steps + 1) * d * d);
        let mut pm = dich.p_minus.clone();
        let mut pp = dich.p_plus.clone();
        for _lag in 0..=m_steps {
            k_minus.extend_from_slice(&flatten(&pm));
            k_plus.extend_from_slice(&flatten(&pp));
            pm = &step_f * pm;
            pp = &step_b * pp;
        }
        return Ok((KernelPlan::Lag { k_minus, k_plus }, stat));
    }
    let factors = if model.is_commutative() {
        cocycle_factors(model, &sub)
    } else {
        sequential_factors(model, &sub)
    };
    let mut g = Vec::with_capacity(n * d * d);
    let mut gp_minus = Vec::with_capacity(n * d * d);
    let mut gp_plus = Vec::with_capacity(n * d * d);
    for j in 0..n {
        g.extend_from_slice(&flatten(&factors.g[j]));
        gp_minus.extend_from_slice(&flatten(&(&factors.g_inv[j] * &dich.p_minus)));
        gp_plus.extend_from_slice(&flatten(&(&factors.g_inv[j] * &dich.p_plus)));
    }
    // Skorohod-excluded inverse factors per channel (commutative explicit form).
    let channels = model.channels();
    let mut h_minus = Vec::with_capacity(channels);
    if model.is_commutative() {
        for k in 0..channels {
            let mut hk = Vec::with_capacity(n * d * d);
            for j in 0..n {
                let t = j as f64 * grid.dt;
                let mut arg = -&model.a * t;
                for (l, bl) in model.b.iter().enumerate() {
                    let idx = if l == k { (j + 1).min(n - 1) } else { j };
                    arg -= bl * sub.value(l, idx);
                }
                hk.extend_from_slice(&flatten(&(expm(&arg) * &dich.p_minus)));
            }
            h_minus.push(hk);
        }
    } else {
        // One-sided non-commutative: no explicit exclusion is available; the
        // left-point kernel g_inv is used for every channel.
        for _ in 0..channels {
            h_minus.push(gp_minus.clone());
        }
    }
    Ok((KernelPlan::Factored { g, gp_minus, gp_plus, h_minus }, stat))
}

/// Restriction of the path to the solver window, re-anchored and relabeled
/// with solver grid times.
fn subpath(path: &BrownianPath, offset: usize, grid: &TimeGrid) -> Result<BrownianPath> {
    let n = grid.n_points();
    let values: Vec<Vec<f64>> = (0..path.channels)
        .map(|k| {
            let src = path.channel(k);
            let anchor = src[offset];
            (0..n).map(|i| src[offset + i] - anchor).collect()
        })
        .collect();
    Ok(BrownianPath::from_values(*grid, values, path.seed))
}

/// Exact windowed tempered statistic, specialized per plan shape.
fn stat_for_solver(model: &LinearModel, sub: &BrownianPath, dich: &Dichotomy, m_steps: usize) -> f64 {
    let d = model.dim();
    if model.is_deterministic() || d > 1 {
        return temperedness_stat_windowed(model, sub, dich, Some(m_steps));
    }
    // Scalar noisy case: O(n) sliding-window scan in the log domain.
    let n = sub.grid.n_points();
    let dt = sub.grid.dt;
    let a = model.a[(0, 0)];
    let mut l = vec![0.0f64; n];
    for j in 0..n {
        let mut v = a * (j as f64 * dt);
        for (k, bk) in model.b.iter().enumerate() {
            v += bk[(0, 0)] * sub.value(k, j);
        }
        l[j] = v;
    }
    let lambda = dich.lambda;
    let mut best = f64::NEG_INFINITY;
    if dich.p_minus[(0, 0)].abs() > 0.5 {
        let rm = dich.rate_minus();
        let r: Vec<f64> = (0..n).map(|j| l[j] - 0.5 * rm * (j as f64 * dt)).collect();
        best = best.max(sliding_forward_max(&r, m_steps, |i| lambda * sub.grid.time(i).abs()));
    }
    if dich.p_plus[(0, 0)].abs() > 0.5 {
        let rp = dich.rate_plus();
        let r: Vec<f64> = (0..n).map(|j| l[j] - 0.5 * rp * (j as f64 * dt)).collect();
        best = best.max(sliding_backward_max(&r, m_steps, |i| lambda * sub.grid.time(i).abs()));
    }
    best.exp()
}

/// `max_i [ max_{j in [i, i+w]} r[j] - r[i] - penalty(i) ]` via monotone deque.
fn sliding_forward_max(r: &[f64], w: usize, penalty: impl Fn(usize) -> f64) -> f64 {
    let n = r.len();
    let mut deque: std::collections::VecDeque<usize> = std::collections::VecDeque::new();
    for j in 0..=w.min(n - 1) {
        while let Some(&b) = deque.back() {
            if r[b] <= r[j] {
                deque.pop_back();
            } else {
                break;
            }
        }
        deque.push_back(j);
    }
    let mut best = f64::NEG_INFINITY;
    for i in 0..n {
        while let Some(&f) = deque.front() {
            if f < i {
                deque.pop_front();
            } else {
                break;
            }
        }
        if let Some(&f) = deque.front() {
            best = best.max(r[f] - r[i] - penalty(i));
        }
        let incoming = i + w + 1;
        if incoming < n {
            while let Some(&b) = deque.back() {
                if r[b] <= r[incoming] {
                    deque.pop_back();
                } else {
                    break;
                }
            }
            deque.push_back(incoming);
        }
    }
    best
}

/// `max_i [ max_{j in [i-w, i]} r[j] - r[i] - penalty(i) ]`.
fn sliding_backward_max(r: &[f64], w: usize, penalty: impl Fn(usize) -> f64) -> f64 {
    let n = r.len();
    let mut deque: std::collections::VecDeque<usize> = std::collections::VecDeque::new();
    let mut best = f64::NEG_INFINITY;
    for i in 0..n {
        while let Some(&b) = deque.back() {
            if r[b] <= r[i] {
                deque.pop_back();
            } else {
                break;
            }
        }
        deque.push_back(i);
        while let Some(&f) = deque.front() {
            if f + w < i {
                deque.pop_front();
            } else {
                break;
            }
        }
        if let Some(&f) = deque.front() {
            best = best.max(r[f] - r[i] - penalty(i));
        }
    }
    best
}

/// FFT evaluation of `out[i] = sum_{lag=0..m} K[lag] f[i -+ lag]`
/// (convolution for forward kernels, correlation with `reversed = true`).
fn fft_lag_conv(kernel: &[f64], fvals: &[f64], d: usize, n: usize, m: usize, reversed: bool) -> Vec<f64> {
    let len = (n + m + 1).next_power_of_two();
    let (fft, ifft) = fft_pair(len);
    // Spectra of the input components.
    let mut f_hat: Vec<Vec<Complex<f64>>> = Vec::with_capacity(d);
    for c in 0..d {
        let mut buf = vec![Complex::new(0.0, 0.0); len];
        for j in 0..n {
            buf[j].re = fvals[j * d + c];
        }
        fft.process(&mut buf);
        f_hat.push(buf);
    }
    let mut out = vec![0.0; n * d];
    let mut acc = vec![Complex::new(0.0, 0.0); len];
    let mut kbuf = vec![Complex::new(0.0, 0.0); len];
    for r in 0..d {
        for v in acc.iter_mut() {
            *v = Complex::new(0.0, 0.0);
        }
        for c in 0..d {
            for v in kbuf.iter_mut() {
                *v = Complex::new(0.0, 0.0);
            }
            if reversed {
                // Correlation: conv with the index-reversed kernel, shifted by m.
                for lag in 0..=m {
                    kbuf[m - lag].re = kernel[lag * d * d + r * d + c];
                }
            } else {
                for lag in 0..=m {
                    kbuf[lag].re = kernel[lag * d * d + r * d + c];
                }
            }
            fft.process(&mut kbuf);
            for (a, (kk, ff)) in acc.iter_mut().zip(kbuf.iter().zip(f_hat[c].iter())) {
                *a += kk * ff;
            }
        }
        ifft.process(&mut acc);
        let scale = 1.0 / len as f64;
        if reversed {
            for i in 0..n {
                out[i * d + r] = acc[i + m].re * scale;
            }
        } else {
            for i in 0..n {
                out[i * d + r] = acc[i].re * scale;
            }
        }
    }
    out
}

/// Anderson mixing of fixed-point iterates (type II, small history).
struct AndersonMixer {
    depth: usize,
    ys: Vec<Vec<f64>>,
    fs: Vec<Vec<f64>>,
    len: usize,
}

impl AndersonMixer {
    fn new(depth: usize, len: usize) -> Self {
        AndersonMixer { depth, ys: Vec::new(), fs: Vec::new(), len }
    }

    fn next_iterate(&mut self, y: &[f64], m_y: &[f64], alpha: f64) -> Option<Vec<f64>> {
        if self.depth == 0 {
            return None;
        }
        let f: Vec<f64> = m_y.iter().zip(y.iter()).map(|(a, b)| a - b).collect();
        self.ys.push(y.to_vec());
        self.fs.push(f);
        if self.ys.len() > self.depth + 1 {
            self.ys.remove(0);
            self.fs.remove(0);
        }
        let k = self.ys.len();
        if k < 2 {
            return None;
        }
        // Minimize || sum_i theta_i f_i ||^2 with sum theta = 1 via the
        // difference parametrization.
        let p = k - 1;
        let mut df = vec![vec![0.0; self.len]; p];
        for i in 0..p {
            for j in 0..self.len {
                df[i][j] = self.fs[i + 1][j] - self.fs[i][j];
            }
        }
        let mut gram = DMatrix::<f64>::zeros(p, p);
        let mut rhs = DVector::<f64>::zeros(p);
        let f_last = &self.fs[k - 1];
        for i in 0..p {
            for j in 0..p {
                gram[(i, j)] = df[i].iter().zip(df[j].iter()).map(|(a, b)| a * b).sum();
            }
            rhs[i] = df[i].iter().zip(f_last.iter()).map(|(a, b)| a * b).sum();
        }
        for i in 0..p {
            gram[(i, i)] += 1e-12 * (1.0 + gram[(i, i)].abs());
        }
        let gamma = gram.lu().solve(&rhs)?;
        // Combination weights over the k iterates: the residual combination is
        // f_k - sum_i gamma_i (f_{i+1} - f_i).
        let mut theta = vec![0.0; k];
        theta[k - 1] = 1.0;
        for i in 0..p {
            theta[i + 1] -= gamma[i];
            theta[i] += gamma[i];
        }
        let mut next = vec![0.0; self.len];
        for (i, th) in theta.iter().enumerate() {
            if *th == 0.0 {
                continue;
            }
            for j in 0..self.len {
                next[j] += th * (self.ys[i][j] + alpha * self.fs[i][j]);
            }
        }
        Some(next)
    }
}

/// The path grid a solver with this configuration needs: the extended window
/// `[-T-H, T+H]` plus whole extra periods on each side (right ones keep the
/// tau-shifted solve of the periodicity check inside the window, left ones
/// make room for pull-back runs). All boundaries are aligned to solver steps.
pub fn required_path_grid(
    cfg: &SolverConfig,
    tau: f64,
    extra_left_periods: usize,
    extra_right_periods: usize,
) -> Result<TimeGrid> {
    let dt = cfg.snapped_dt(tau);
    let k_t = (cfg.t_core / dt).ceil().max(1.0) as usize;
    let m_steps = (cfg.horizon / dt).ceil().max(1.0) as usize;
    let k_tau = (tau / dt).round() as usize;
    let half = k_t + m_steps;
    TimeGrid::new(
        -((half + extra_left_periods * k_tau) as f64) * dt,
        dt,
        2 * half + (extra_left_periods + extra_right_periods) * k_tau,
    )
}

/// One-call convenience wrapper: build the solver and run it.
pub fn solve_fixed_point(
    model: &LinearModel,
    field: &PeriodicField,
    beta: Option<&AdditiveNoise>,
    path: &BrownianPath,
    cfg: &SolverConfig,
) -> Result<(GridFunction, SolveReport)> {
    IhrieSolver::new(model, field, beta, path, cfg)?.solve()
}

/// Public quadrature entry point mirroring the map M: builds a solver and
/// applies it once to `y` (deterministic part only).
pub fn apply_m(
    y: &GridFunction,
    model: &LinearModel,
    field: &PeriodicField,
    path: &BrownianPath,
    cfg: &SolverConfig,
    n_level: Option<usize>,
) -> Result<GridFunction> {
    let mut cfg = cfg.clone();
    cfg.truncation = n_level.or(cfg.truncation);
    let solver = IhrieSolver::new(model, field, None, path, &cfg)?;
    if y.grid != solver.grid || y.dim != model.dim() {
        return Err(Error::DimensionMismatch(format!(
            "iterate is on a {}-point grid of dimension {}, the solver expects {} points",
            y.grid.n_points(),
            y.dim,
            solver.grid.n_points()
        )));
    }
    Ok(solver.apply_m(y))
}

/// As `apply_m` plus the additive Wiener sums.
pub fn apply_m_additive(
    y: &GridFunction,
    model: &LinearModel,
    field: &PeriodicField,
    beta: &AdditiveNoise,
    path: &BrownianPath,
    cfg: &SolverConfig,
    n_level: Option<usize>,
) -> Result<GridFunction> {
    let mut cfg = cfg.clone();
    cfg.truncation = n_level.or(cfg.truncation);
    let solver = IhrieSolver::new(model, field, Some(beta), path, &cfg)?;
    if y.grid != solver.grid || y.dim != model.dim() {
        return Err(Error::DimensionMismatch(format!(
            "iterate is on a {}-point grid of dimension {}, the solver expects {} points",
            y.grid.n_points(),
            y.dim,
            solver.grid.n_points()
        )));
    }
    Ok(solver.apply_m_additive(y))
}

#[derive(Debug, Clone)]
pub struct PullbackResult {
    pub state: DVector<f64>,
    pub previous: DVector<f64>,
    /// |x_K - x_{K-1}|: successive pull-back convergence diagnostic.
    pub diagnostic: f64,
}

/// Pull-back evaluation of the attracting solution at time t: integrate the
/// SDE forward from zero at `t - K tau`. Requires an entirely negative
/// spectrum; otherwise the integral equation is the only route.
pub fn pullback_solve(
    model: &LinearModel,
    field: &PeriodicField,
    beta: Option<&AdditiveNoise>,
    path: &BrownianPath,
    t: f64,
    k_periods: usize,
    _cfg: &SolverConfig,
) -> Result<PullbackResult> {
    let dich = build_dichotomy(model, None, None)?;
    if !dich.one_sided_negative() {
        return Err(Error::NotDissipative);
    }
    let tau = field.tau;
    let x0 = DVector::zeros(model.dim());
    let run = |k: usize| -> Result<DVector<f64>> {
        if k == 0 {
            return Ok(x0.clone());
        }
        let s = t - k as f64 * tau;
        Ok(heun_stratonovich(model, Some(field), beta, path, &x0, s, t)?.last().clone())
    };
    let state = run(k_periods)?;
    let previous = run(k_periods.saturating_sub(1))?;
    let diagnostic = (&state - &previous).norm();
    Ok(PullbackResult { state, previous, diagnostic })
}

/// The closed-form solution of `dX = -X dt + c cos t dt + 10 sin t dW`,
/// discretized on the path grid: the trapezoid quadrature of
/// `int_{t-H}^t e^{-(t-s)} c cos s ds` plus the left-point Wiener sum
/// `10 sum_j e^{-(t - s_j)} sin(s_j) dW_j`.
pub fn closed_form_additive(path: &BrownianPath, c: f64, t: f64, h: f64) -> Result<f64> {
    let it = path.grid.index_of(t)?;
    let m = path.grid.steps_in(h)? as usize;
    if it < m {
        return Err(Error::OffGrid { t: t - h, t_start: path.grid.t_start, dt: path.grid.dt });
    }
    let dt = path.grid.dt;
    let lo = it - m;
    // Deterministic part, same composite trapezoid as the solver quadrature.
    let mut q = Vec::with_capacity(m + 1);
    for j in lo..=it {
        let lag = (it - j) as f64 * dt;
        let s = path.grid.time(j);
        q.push((-lag).exp() * (c * s.cos()));
    }
    let mut det = 0.0;
    let mut acc = [0.0f64];
    trapezoid_window(&q, 1, 0, m, dt, &mut acc);
    det += acc[0];
    // Stochastic part.
    let mut stoch = 0.0;
    for j in lo..it {
        let lag = (it - j) as f64 * dt;
        let s = path.grid.time(j);
        let dw = path.value(0, j + 1) - path.value(0, j);
        stoch += (-lag).exp() * 10.0 * s.sin() * dw;
    }
    Ok(det + stoch)
}

/// Precomputed evaluator for the closed form of
/// `dX = -X dt + cos t dt + 10 X o dW`:
/// `Y(t) = int_{t-H}^t e^{-(t-s) + 10 (W_t - W_s)} cos s ds`, using the same
/// pointwise cocycle factorization and trapezoid rule as the solver.
pub struct ClosedFormMultiplicative {
    grid: TimeGrid,
    g: Vec<f64>,
    q: Vec<f64>,
}

impl ClosedFormMultiplicative {
    pub fn new(path: &BrownianPath) -> Self {
        let model = LinearModel::new(
            DMatrix::from_element(1, 1, -1.0),
            vec![DMatrix::from_element(1, 1, 10.0)],
        )
        .expect("scalar model");
        let factors = cocycle_factors(&model, path);
        let n = path.grid.n_points();
        let mut g = Vec::with_capacity(n);
        let mut q = Vec::with_capacity(n);
        for j in 0..n {
            g.push(factors.g[j][(0, 0)]);
            // g_inv * P^- * F with P^- = 1, F = cos(s_j).
            let gp = factors.g_inv[j][(0, 0)] * 1.0;
            q.push(gp * path.grid.time(j).cos());
        }
        ClosedFormMultiplicative { grid: path.grid, g, q }
    }

    pub fn eval(&self, t: f64, h: f64) -> Result<f64> {
        let it = self.grid.index_of(t)?;
        let m = self.grid.steps_in(h)? as usize;
        if it < m {
            return Err(Error::OffGrid { t: t - h, t_start: self.grid.t_start, dt: self.grid.dt });
        }
        let mut acc = [0.0f64];
        trapezoid_window(&self.q, 1, it - m, it, self.grid.dt, &mut acc);
        Ok(self.g[it] * acc[0])
    }
}

/// One-shot evaluation of the multiplicative-benchmark closed form.
pub fn closed_form_multiplicative(path: &BrownianPath, t: f64, h: f64) -> Result<f64> {
    ClosedFormMultiplicative::new(path).eval(t, h)
}
