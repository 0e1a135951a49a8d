//! The linear cocycle `Phi(t, w) = exp{At + sum_k B_k W_t^k}` generated by
//! `dPhi = A Phi dt + sum_k B_k Phi o dW^k`, its exponential dichotomy from the
//! spectral split of `(A + A^T)/2`, truncated cocycle matrices, tempered
//! statistics, Malliavin derivatives and Lyapunov estimates.

use crate::error::{Error, Result};
use crate::expm::{expm, expm_symmetric};
use crate::grid::TimeGrid;
use crate::paths::{sample_path, BrownianPath};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

/// Linear part of the model: state matrix A (1/time) and noise matrices
/// B_k (1/sqrt(time)). `M = b.len()` may be zero for a deterministic linear part.
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub a: DMatrix<f64>,
    pub b: Vec<DMatrix<f64>>,
    commutative: bool,
}

impl LinearModel {
    pub fn new(a: DMatrix<f64>, b: Vec<DMatrix<f64>>) -> Result<Self> {
        let d = a.nrows();
        if d == 0 || a.ncols() != d {
            return Err(Error::DimensionMismatch(format!(
                "A must be square and non-empty, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        for (k, bk) in b.iter().enumerate() {
            if bk.nrows() != d || bk.ncols() != d {
                return Err(Error::DimensionMismatch(format!(
                    "B_{k} must be {d}x{d}, got {}x{}",
                    bk.nrows(),
                    bk.ncols()
                )));
            }
        }
        let mut model = LinearModel { a, b, commutative: false };
        model.commutative = check_commutativity(&model, model.default_comm_tol());
        Ok(model)
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn channels(&self) -> usize {
        self.b.len()
    }

    pub fn is_commutative(&self) -> bool {
        self.commutative
    }

    pub fn default_comm_tol(&self) -> f64 {
        let scale: f64 = self.a.norm() + self.b.iter().map(|m| m.norm()).sum::<f64>();
        1e-10 * scale.max(1.0)
    }

    /// Symmetric part S = (A + A^T)/2.
    pub fn symmetric_part(&self) -> DMatrix<f64> {
        (&self.a + self.a.transpose()) * 0.5
    }

    /// All noise matrices identically zero.
    pub fn is_deterministic(&self) -> bool {
        self.b.iter().all(|m| m.iter().all(|&x| x == 0.0))
    }

    /// A and every B_k diagonal (enables per-coordinate factorizations).
    pub fn is_diagonal(&self) -> bool {
        let diag = |m: &DMatrix<f64>| {
            m.row_iter()
                .enumerate()
                .all(|(i, row)| row.iter().enumerate().all(|(j, &x)| i == j || x == 0.0))
        };
        diag(&self.a) && self.b.iter().all(diag)
    }

    /// The Appendix norm `||B|| = max_k ||B_k + B_k^T|| / 2` (spectral).
    pub fn noise_norm(&self) -> f64 {
        self.b
            .iter()
            .map(|bk| {
                let s = (bk + bk.transpose()) * 0.5;
                SymmetricEigen::new(s).eigenvalues.iter().fold(0.0f64, |m, &l| m.max(l.abs()))
            })
            .fold(0.0, f64::max)
    }
}

/// True iff all pairwise commutators among {A, A^T, B_k, B_k^T} have
/// Frobenius norm at most `comm_tol`.
pub fn check_commutativity(model: &LinearModel, comm_tol: f64) -> bool {
    let mut family = vec![model.a.clone(), model.a.transpose()];
    for bk in &model.b {
        family.push(bk.clone());
        family.push(bk.transpose());
    }
    for i in 0..family.len() {
        for j in (i + 1)..family.len() {
            let comm = &family[i] * &family[j] - &family[j] * &family[i];
            if comm.norm() > comm_tol {
                return false;
            }
        }
    }
    true
}

/// Spectral split of S = (A + A^T)/2: Lyapunov exponents, projectors onto the
/// stable/unstable sums of eigenspaces, the spectral gap and the weight Lambda.
#[derive(Debug, Clone)]
pub struct Dichotomy {
    /// Distinct eigenvalues of S, descending.
    pub eigenvalues: Vec<f64>,
    pub multiplicities: Vec<usize>,
    pub p_minus: DMatrix<f64>,
    pub p_plus: DMatrix<f64>,
    /// Largest negative eigenvalue (the contraction rate is mu_minus / 2).
    pub mu_minus: Option<f64>,
    /// Smallest positive eigenvalue (the backward contraction rate is mu_plus / 2).
    pub mu_plus: Option<f64>,
    /// gap = min{ -mu_minus, mu_plus } over the sides present.
    pub gap: f64,
    /// Weight of the exponentially weighted norm, in (0, gap/4).
    pub lambda: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DichotomyReport {
    pub eigenvalues: Vec<f64>,
    pub multiplicities: Vec<usize>,
    pub mu_minus: Option<f64>,
    pub mu_plus: Option<f64>,
    pub gap: f64,
    pub lambda: f64,
}

impl Dichotomy {
    pub fn report(&self) -> DichotomyReport {
        DichotomyReport {
            eigenvalues: self.eigenvalues.clone(),
            multiplicities: self.multiplicities.clone(),
            mu_minus: self.mu_minus,
            mu_plus: self.mu_plus,
            gap: self.gap,
            lambda: self.lambda,
        }
    }

    pub fn one_sided_negative(&self) -> bool {
        self.mu_plus.is_none()
    }

    pub fn one_sided_positive(&self) -> bool {
        self.mu_minus.is_none()
    }

    /// Decay rate in the minus-branch envelope `N e^{(mu_minus/2) t}`.
    pub fn rate_minus(&self) -> f64 {
        self.mu_minus.unwrap_or(-self.gap)
    }

    /// Growth rate in the plus-branch envelope `N e^{(mu_plus/2) t}`, t <= 0.
    pub fn rate_plus(&self) -> f64 {
        self.mu_plus.unwrap_or(self.gap)
    }
}

/// Build the dichotomy of a model. `gap_tol` defaults to `1e-8 * ||S||_F` and
/// `lambda` to `gap / 8` (the weighted norm requires `0 < lambda < gap / 4`).
pub fn build_dichotomy(
    model: &LinearModel,
    gap_tol: Option<f64>,
    lambda: Option<f64>,
) -> Result<Dichotomy> {
    let d = model.dim();
    let s = model.symmetric_part();
    let gap_tol = gap_tol.unwrap_or(1e-8 * s.norm());
    let eig = SymmetricEigen::new(s.clone());

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].partial_cmp(&eig.eigenvalues[i]).unwrap());

    for &i in &order {
        let lam = eig.eigenvalues[i];
        if lam.abs() <= gap_tol {
            return Err(Error::NotHyperbolic { eigenvalue: lam, gap_tol });
        }
    }

    let mut p_plus = DMatrix::<f64>::zeros(d, d);
    for &i in &order {
        if eig.eigenvalues[i] > 0.0 {
            let v = eig.eigenvectors.column(i);
            for r in 0..d {
                for c in 0..d {
                    p_plus[(r, c)] += v[r] * v[c];
                }
            }
        }
    }
    let p_minus = DMatrix::identity(d, d) - &p_plus;

    // Cluster numerically equal eigenvalues into distinct values with multiplicity.
    let cluster_tol = (1e-7 * s.norm()).max(1e-12);
    let mut eigenvalues: Vec<f64> = Vec::new();
    let mut multiplicities: Vec<usize> = Vec::new();
    for &i in &order {
        let lam = eig.eigenvalues[i];
        match eigenvalues.last() {
            Some(&last) if (last - lam).abs() <= cluster_tol => {
                *multiplicities.last_mut().unwrap() += 1;
            }
            _ => {
                eigenvalues.push(lam);
                multiplicities.push(1);
            }
        }
    }

    let mu_plus = eigenvalues.iter().copied().filter(|&l| l > 0.0).fold(None, |m: Option<f64>, l| {
        Some(m.map_or(l, |x: f64| x.min(l)))
    });
    let mu_minus = eigenvalues.iter().copied().filter(|&l| l < 0.0).fold(None, |m: Option<f64>, l| {
        Some(m.map_or(l, |x: f64| x.max(l)))
    });
    let gap = match (mu_minus, mu_plus) {
        (Some(mm), Some(mp)) => (-mm).min(mp),
        (Some(mm), None) => -mm,
        (None, Some(mp)) => mp,
        (None, None) => unreachable!("d >= 1 and no eigenvalue in the gap band"),
    };
    let lambda = lambda.unwrap_or(gap / 8.0);
    if !(lambda > 0.0 && lambda < 0.25 * gap) {
        return Err(Error::Config(format!(
            "lambda = {lambda} must lie in (0, gap/4) = (0, {})",
            0.25 * gap
        )));
    }

    Ok(Dichotomy { eigenvalues, multiplicities, p_minus, p_plus, mu_minus, mu_plus, gap, lambda })
}

/// The mixed-spectrum commutativity gate: projectors are only meaningful for
/// non-commutative models when the spectrum is one-sided.
pub fn require_projectable(model: &LinearModel, dich: &Dichotomy) -> Result<()> {
    if model.is_commutative() || dich.one_sided_negative() || dich.one_sided_positive() {
        Ok(())
    } else {
        Err(Error::NonCommutativeMixedSpectrum)
    }
}

/// `Phi(u, theta_s w) = exp{A u + sum_k B_k (W^k_{s+u} - W^k_s)}` via the
/// explicit commutative form; `u` may be negative.
pub fn phi(model: &LinearModel, path: &BrownianPath, u: f64, s: f64) -> Result<DMatrix<f64>> {
    if !model.is_commutative() {
        return Err(Error::NonCommutative);
    }
    let i = path.grid.index_of(s)?;
    let m = path.grid.steps_in(u)?;
    let j = i as i64 + m;
    if j < 0 || j > path.grid.n_steps as i64 {
        return Err(Error::OffGrid { t: s + u, t_start: path.grid.t_start, dt: path.grid.dt });
    }
    let j = j as usize;
    let u_exact = m as f64 * path.grid.dt;
    let mut arg = &model.a * u_exact;
    for (k, bk) in model.b.iter().enumerate() {
        let dw = path.value(k, j) - path.value(k, i);
        arg += bk * dw;
    }
    Ok(expm(&arg))
}

/// One-step Heun (Stratonovich midpoint) transition matrix `I + D + D^2/2`
/// for the linear equation; `D = A h + sum_k B_k dW`.
fn heun_step_matrix(a: &DMatrix<f64>, b: &[DMatrix<f64>], h: f64, dw: &[f64]) -> DMatrix<f64> {
    let d = a.nrows();
    let mut dmat = a * h;
    for (k, bk) in b.iter().enumerate() {
        dmat += bk * dw[k];
    }
    let sq = &dmat * &dmat;
    DMatrix::identity(d, d) + dmat + sq * 0.5
}

/// Heun integration of the cocycle equation along the path grid, refined by
/// `substeps` (linear interpolation of increments). For `u < 0` the inverse
/// Stratonovich equation `dPsi = -A Psi dt - sum B_k Psi o dW` is integrated
/// forward over |u| from s + u, which converges to `phi` as dt -> 0 in the
/// commutative case.
pub fn phi_numeric(
    model: &LinearModel,
    path: &BrownianPath,
    u: f64,
    s: f64,
    substeps: usize,
) -> Result<DMatrix<f64>> {
    let substeps = substeps.max(1);
    let i = path.grid.index_of(s)?;
    let m = path.grid.steps_in(u)?;
    let j = i as i64 + m;
    if j < 0 || j > path.grid.n_steps as i64 {
        return Err(Error::OffGrid { t: s + u, t_start: path.grid.t_start, dt: path.grid.dt });
    }
    let d = model.dim();
    let mm = model.channels();
    let mut out = DMatrix::<f64>::identity(d, d);
    let h = path.grid.dt / substeps as f64;
    let neg_a = -&model.a;
    let neg_b: Vec<DMatrix<f64>> = model.b.iter().map(|bk| -bk).collect();
    let (lo, hi, forward) = if m >= 0 { (i, j as usize, true) } else { (j as usize, i, false) };
    for idx in lo..hi {
        let mut dw: Vec<f64> = (0..mm).map(|k| path.value(k, idx + 1) - path.value(k, idx)).collect();
        for w in dw.iter_mut() {
            *w /= substeps as f64;
        }
        for _ in 0..substeps {
            let step = if forward {
                heun_step_matrix(&model.a, &model.b, h, &dw)
            } else {
                heun_step_matrix(&neg_a, &neg_b, h, &dw)
            };
            out = step * out;
        }
    }
    Ok(out)
}

/// Dispatch to the explicit form for commutative models and Heun integration
/// otherwise (one-sided spectra per the projectability gate).
pub fn propagator(model: &LinearModel, path: &BrownianPath, u: f64, s: f64) -> Result<DMatrix<f64>> {
    if model.is_commutative() {
        phi(model, path, u, s)
    } else {
        phi_numeric(model, path, u, s, 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TruncationSign {
    Minus,
    Plus,
}

/// Envelope `N e^{rate/2 * u} e^{Lambda |s|}` of the truncation.
fn truncation_envelope(dich: &Dichotomy, sign: TruncationSign, u: f64, s: f64, n_level: usize) -> f64 {
    let rate = match sign {
        TruncationSign::Minus => dich.rate_minus(),
        TruncationSign::Plus => dich.rate_plus(),
    };
    n_level as f64 * (0.5 * rate * u).exp() * (dich.lambda * s.abs()).exp()
}

/// The truncated cocycle `Phi^N(u, theta_s w) P^{-+}`: the raw projected
/// cocycle scaled by `min{1, N e^{rate u/2} e^{Lambda|s|} / ||Phi P||_F}`.
pub fn phi_truncated(
    model: &LinearModel,
    path: &BrownianPath,
    dich: &Dichotomy,
    u: f64,
    s: f64,
    n_level: usize,
    sign: TruncationSign,
) -> Result<DMatrix<f64>> {
    match sign {
        TruncationSign::Minus if u < 0.0 => return Err(Error::SignMismatch { sign, u }),
        TruncationSign::Plus if u > 0.0 => return Err(Error::SignMismatch { sign, u }),
        _ => {}
    }
    require_projectable(model, dich)?;
    let proj = match sign {
        TruncationSign::Minus => &dich.p_minus,
        TruncationSign::Plus => &dich.p_plus,
    };
    let base = propagator(model, path, u, s)? * proj;
    let norm = base.norm();
    if norm == 0.0 {
        return Ok(base);
    }
    let env = truncation_envelope(dich, sign, u, s, n_level);
    let factor = (env / norm).min(1.0);
    Ok(base * factor)
}

/// Cached pointwise factorization `Phi(t_j - t_i, theta_{t_i} w) = G[j] Ginv[i]`
/// valid under Condition (C); for zero noise the kernel depends on the lag only.
pub(crate) struct CocycleFactors {
    pub g: Vec<DMatrix<f64>>,
    pub g_inv: Vec<DMatrix<f64>>,
}

pub(crate) fn cocycle_factors(model: &LinearModel, path: &BrownianPath) -> CocycleFactors {
    let n = path.grid.n_points();
    let mut g = Vec::with_capacity(n);
    let mut g_inv = Vec::with_capacity(n);
    for j in 0..n {
        // Anchor the factorization at the window start so exponents stay moderate
        // relative to the window, not to absolute time.
        let t = j as f64 * path.grid.dt;
        let mut arg = &model.a * t;
        for (k, bk) in model.b.iter().enumerate() {
            arg += bk * path.value(k, j);
        }
        g.push(expm(&arg));
        g_inv.push(expm(&(-&arg)));
    }
    CocycleFactors { g, g_inv }
}

/// Discrete tempered statistic: the sup over grid pairs of
/// `||Phi(t, theta_s w) P^-||_F e^{-mu_minus t / 2 - Lambda |s|}` (t >= 0) and
/// `||Phi(t, theta_s w) P^+||_F e^{-mu_plus t / 2 - Lambda |s|}` (t <= 0).
///
/// This is the tight per-branch discount: `N >= stat` makes every truncation
/// factor equal to one on this path. `max_lag_steps` restricts the elapsed
/// times scanned; `None` scans all pairs in the window.
pub fn temperedness_stat_windowed(
    model: &LinearModel,
    path: &BrownianPath,
    dich: &Dichotomy,
    max_lag_steps: Option<usize>,
) -> f64 {
    let n = path.grid.n_points();
    let dt = path.grid.dt;
    let lam = dich.lambda;
    let max_lag = max_lag_steps.unwrap_or(n - 1).min(n - 1);
    let have_minus = dich.p_minus.norm() > 0.0;
    let have_plus = dich.p_plus.norm() > 0.0;
    let rm = dich.rate_minus();
    let rp = dich.rate_plus();

    if model.is_deterministic() {
        // Phi depends on the lag only; the base time enters through
        // e^{-Lambda |s|}, maximized at the admissible s closest to zero.
        let mut stat = 0.0f64;
        let e_step_minus = expm(&(&model.a * dt));
        let e_step_plus = expm(&(-&model.a * dt));
        let mut pow_minus = dich.p_minus.clone();
        let mut pow_plus = dich.p_plus.clone();
        for lag in 0..=max_lag {
            let u = lag as f64 * dt;
            if have_minus {
                // Bases s = t_i with i in [0, n-1-lag].
                let s_min = min_abs_time(path.grid.t_start, dt, n - 1 - lag);
                let val = pow_minus.norm() * (-0.5 * rm * u - lam * s_min).exp();
                stat = stat.max(val);
            }
            if have_plus {
                // Bases s = t_i with i in [lag, n-1]; elapsed -u.
                let s_min = min_abs_time(path.grid.t_start + lag as f64 * dt, dt, n - 1 - lag);
                let val = pow_plus.norm() * (0.5 * rp * u - lam * s_min).exp();
                stat = stat.max(val);
            }
            if lag < max_lag {
                pow_minus = &e_step_minus * pow_minus;
                pow_plus = &e_step_plus * pow_plus;
            }
        }
        return stat;
    }

    let factors = if model.is_commutative() {
        cocycle_factors(model, path)
    } else {
        sequential_factors(model, path)
    };
    let mut stat = 0.0f64;
    for i in 0..n {
        let s_abs = path.grid.time(i).abs();
        let hi = (i + max_lag).min(n - 1);
        if have_minus {
            let gi = &factors.g_inv[i];
            for j in i..=hi {
                let u = (j - i) as f64 * dt;
                let norm = (&factors.g[j] * gi * &dich.p_minus).norm();
                let val = norm * (-0.5 * rm * u - lam * s_abs).exp();
                stat = stat.max(val);
            }
        }
        if have_plus {
            let lo = i.saturating_sub(max_lag);
            let gi = &factors.g_inv[i];
            for j in lo..=i {
                let u = -((i - j) as f64 * dt);
                let norm = (&factors.g[j] * gi * &dich.p_plus).norm();
                let val = norm * (-0.5 * rp * u - lam * s_abs).exp();
                stat = stat.max(val);
            }
        }
    }
    stat
}

/// Full-window tempered statistic (all grid pairs).
pub fn temperedness_stat(model: &LinearModel, path: &BrownianPath, dich: &Dichotomy) -> f64 {
    temperedness_stat_windowed(model, path, dich, None)
}

/// Smallest absolute grid time among `t_start + i dt`, `i = 0..=last`.
fn min_abs_time(t_start: f64, dt: f64, last: usize) -> f64 {
    let t_end = t_start + last as f64 * dt;
    if t_start <= 0.0 && t_end >= 0.0 {
        // The grid point nearest zero is within dt of it.
        let i = (-t_start / dt).floor().clamp(0.0, last as f64);
        let a = (t_start + i * dt).abs();
        let b = (t_start + (i + 1.0).min(last as f64) * dt).abs();
        a.min(b)
    } else {
        t_start.abs().min(t_end.abs())
    }
}

/// Running Heun products for non-commutative one-sided models:
/// `Phi_numeric(t_j - t_i, theta_{t_i}) = g[j] * g_inv[i]`.
pub(crate) fn sequential_factors(model: &LinearModel, path: &BrownianPath) -> CocycleFactors {
    let n = path.grid.n_points();
    let d = model.dim();
    let mm = model.channels();
    let mut g = Vec::with_capacity(n);
    let mut g_inv = Vec::with_capacity(n);
    g.push(DMatrix::identity(d, d));
    g_inv.push(DMatrix::identity(d, d));
    for idx in 0..path.grid.n_steps {
        let dw: Vec<f64> = (0..mm).map(|k| path.value(k, idx + 1) - path.value(k, idx)).collect();
        let step = heun_step_matrix(&model.a, &model.b, path.grid.dt, &dw);
        let inv = step.clone().lu().try_inverse().expect("Heun step matrix is singular");
        g.push(&step * &g[idx]);
        g_inv.push(&g_inv[idx] * inv);
    }
    CocycleFactors { g, g_inv }
}

/// Smallest integer N with the sampled path inside the discrete Omega_N, i.e.
/// `Phi^N = Phi P^{-+}` on every scanned grid pair.
pub fn select_truncation_level(stat: f64) -> usize {
    (stat.ceil() as usize).max(1)
}

/// The Malliavin derivative `D_r^l Phi^N(u, theta_s w) P^{-+}`: the interval
/// indicator times `B_l Phi P min{1, env/||Phi P||}` minus (plus, for the plus
/// sign) the norm-gradient correction active only where the truncation binds.
#[allow(clippy::too_many_arguments)]
pub fn malliavin_phi(
    model: &LinearModel,
    path: &BrownianPath,
    dich: &Dichotomy,
    u: f64,
    s: f64,
    l: usize,
    r: f64,
    n_level: usize,
    sign: TruncationSign,
) -> Result<DMatrix<f64>> {
    match sign {
        TruncationSign::Minus if u < 0.0 => return Err(Error::SignMismatch { sign, u }),
        TruncationSign::Plus if u > 0.0 => return Err(Error::SignMismatch { sign, u }),
        _ => {}
    }
    if l >= model.channels() {
        return Err(Error::DimensionMismatch(format!(
            "channel {l} out of range (M = {})",
            model.channels()
        )));
    }
    let d = model.dim();
    let inside = if sign == TruncationSign::Minus { r >= s && r <= s + u } else { r >= s + u && r <= s };
    if !inside {
        return Ok(DMatrix::zeros(d, d));
    }
    let proj = match sign {
        TruncationSign::Minus => &dich.p_minus,
        TruncationSign::Plus => &dich.p_plus,
    };
    let base = phi(model, path, u, s)? * proj;
    let norm = base.norm();
    if norm == 0.0 {
        return Ok(DMatrix::zeros(d, d));
    }
    let env = truncation_envelope(dich, sign, u, s, n_level);
    let binding = norm > env;
    let min_factor = (env / norm).min(1.0);
    let bl = &model.b[l];
    let lead = bl * &base * min_factor;
    let orient = match sign {
        TruncationSign::Minus => 1.0,
        TruncationSign::Plus => -1.0,
    };
    if !binding {
        return Ok(lead * orient);
    }
    // <Phi P, B_l Phi P>_F drives the derivative of the Frobenius norm.
    let blb = bl * &base;
    let inner: f64 = base.iter().zip(blb.iter()).map(|(x, y)| x * y).sum();
    let correction = &base * (env / norm.powi(3) * inner);
    Ok((lead - correction) * orient)
}

/// Ensemble Lyapunov estimate `mean over seeds of log||Phi(T, w) x|| / T`.
pub fn lyapunov_estimate(
    model: &LinearModel,
    seeds: &[u64],
    x: &DVector<f64>,
    t_horizon: f64,
    dt: f64,
) -> f64 {
    use rayon::prelude::*;
    let grid = TimeGrid::covering(0.0, t_horizon, dt).expect("valid Lyapunov grid");
    let t_end = grid.t_end();
    let sum: f64 = seeds
        .par_iter()
        .map(|&seed| {
            let path = sample_path(grid, model.channels(), seed);
            let m = propagator(model, &path, t_end, 0.0).expect("propagator on own grid");
            ((&m * x).norm()).ln() / t_end
        })
        .sum();
    sum / seeds.len() as f64
}

/// Closed-form symmetric-part spectral radius helper used by defaults.
pub fn spectral_norm_sym(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.iter().fold(0.0f64, |a, &l| a.max(l.abs()))
}

/// exp of the symmetric part, `Psi = exp{(A + A^T)/2}`, exposed for tests.
pub fn psi_limit_matrix(model: &LinearModel) -> DMatrix<f64> {
    expm_symmetric(&model.symmetric_part())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{dmatrix, dvector};

    fn model(a: DMatrix<f64>, b: Vec<DMatrix<f64>>) -> LinearModel {
        LinearModel::new(a, b).unwrap()
    }

    fn grid(t0: f64, dt: f64, n: usize) -> TimeGrid {
        TimeGrid::new(t0, dt, n).unwrap()
    }

    #[test]
    fn commutativity_examples() {
        let m1 = model(dmatrix![-1.0, 0.0; 0.0, 2.0], vec![dmatrix![10.0, 0.0; 0.0, 0.0]]);
        assert!(check_commutativity(&m1, m1.default_comm_tol()));
        let m2 = model(dmatrix![-1.0, -1.0; 1.0, -1.0], vec![dmatrix![10.0, 0.0; 0.0, 0.0]]);
        assert!(!check_commutativity(&m2, m2.default_comm_tol()));
        let m3 = model(dmatrix![-1.0, -1.0; 1.0, -1.0], vec![]);
        assert!(check_commutativity(&m3, m3.default_comm_tol()));
    }

    #[test]
    fn dichotomy_diagonal_split() {
        let m = model(dmatrix![-1.0, 0.0; 0.0, 2.0], vec![dmatrix![1.0, 0.0; 0.0, 1.0]]);
        let d = build_dichotomy(&m, None, None).unwrap();
        assert_eq!(d.eigenvalues, vec![2.0, -1.0]);
        assert_eq!(d.mu_minus, Some(-1.0));
        assert_eq!(d.mu_plus, Some(2.0));
        assert_eq!(d.gap, 1.0);
        assert_relative_eq!(d.lambda, 0.125);
        assert_relative_eq!(d.p_minus, dmatrix![1.0, 0.0; 0.0, 0.0], epsilon = 1e-12);
        assert_relative_eq!(d.p_plus, dmatrix![0.0, 0.0; 0.0, 1.0], epsilon = 1e-12);
    }

    #[test]
    fn dichotomy_rotation_is_one_sided() {
        let m = model(dmatrix![-1.0, -1.0; 1.0, -1.0], vec![]);
        let d = build_dichotomy(&m, None, None).unwrap();
        assert_eq!(d.eigenvalues, vec![-1.0]);
        assert_eq!(d.multiplicities, vec![2]);
        assert!(d.one_sided_negative());
        assert_relative_eq!(d.p_minus, DMatrix::identity(2, 2), epsilon = 1e-12);
        assert_eq!(d.gap, 1.0);
    }

    #[test]
    fn zero_eigenvalue_not_hyperbolic() {
        let m = model(dmatrix![0.0, 0.0; 0.0, 1.0], vec![]);
        assert!(matches!(build_dichotomy(&m, None, None), Err(Error::NotHyperbolic { .. })));
    }

    #[test]
    fn projectors_idempotent_and_complementary() {
        let m = model(dmatrix![-2.0, 0.3, 0.0; 0.3, 1.5, 0.0; 0.0, 0.0, -0.5], vec![]);
        let d = build_dichotomy(&m, None, None).unwrap();
        let ddim = 3.0;
        assert!((&d.p_minus * &d.p_minus - &d.p_minus).norm() <= 1e-12 * ddim);
        assert!((&d.p_plus * &d.p_plus - &d.p_plus).norm() <= 1e-12 * ddim);
        assert!((&d.p_minus + &d.p_plus - DMatrix::<f64>::identity(3, 3)).norm() <= 1e-12 * ddim);
    }

    #[test]
    fn phi_identity_and_scalar_form() {
        let g = grid(-1.0, 0.25, 16);
        let m = model(dmatrix![0.0], vec![dmatrix![1.0]]);
        let p = sample_path(g, 1, 3);
        let id = phi(&m, &p, 0.0, 0.5).unwrap();
        assert_eq!(id, DMatrix::identity(1, 1));
        let u = 1.0;
        let s = -0.5;
        let expected = (p.increment(s, s + u).unwrap()[0]).exp();
        assert_relative_eq!(phi(&m, &p, u, s).unwrap()[(0, 0)], expected, epsilon = 1e-14);
    }

    #[test]
    fn cocycle_identity_on_random_inputs() {
        let g = grid(-2.0, 0.125, 32);
        let m = model(
            dmatrix![-1.0, 0.5; 0.5, -1.0],
            vec![dmatrix![0.4, 0.1; 0.1, 0.4], dmatrix![0.2, 0.0; 0.0, 0.2]],
        );
        assert!(m.is_commutative());
        let p = sample_path(g, 2, 17);
        for &(u, v, s) in &[(0.5, 0.75, -1.0), (0.25, 0.25, 0.0), (1.0, -0.5, -0.5)] {
            let lhs = phi(&m, &p, u + v, s).unwrap();
            let rhs = phi(&m, &p, v, s + u).unwrap() * phi(&m, &p, u, s).unwrap();
            assert!((&lhs - &rhs).norm() / lhs.norm() < 1e-10, "u={u} v={v} s={s}");
        }
    }

    #[test]
    fn projection_commutes_with_phi() {
        let m = model(dmatrix![-1.0, 0.0; 0.0, 2.0], vec![dmatrix![0.3, 0.0; 0.0, 0.3]]);
        let d = build_dichotomy(&m, None, None).unwrap();
        let p = sample_path(grid(0.0, 0.1, 20), 1, 5);
        let f = phi(&m, &p, 1.0, 0.5).unwrap();
        let comm = (&d.p_minus * &f - &f * &d.p_minus).norm();
        assert!(comm <= 1e-10 * f.norm());
    }

    #[test]
    fn phi_numeric_deterministic_order() {
        // Zero-noise: Heun reduces to the order-2 deterministic scheme.
        let a = dmatrix![-1.0, 0.3; -0.2, -0.8];
        let m = model(a.clone(), vec![]);
        let exact = expm(&(a * 1.0));
        let mut errs = Vec::new();
        for &n in &[100usize, 200, 400] {
            let g = grid(0.0, 1.0 / n as f64, n);
            let p = BrownianPath::zero(g, 0);
            let num = phi_numeric(&m, &p, 1.0, 0.0, 1).unwrap();
            errs.push((num - &exact).norm());
        }
        assert!(errs[0] / errs[1] > 3.0, "halving dt should quarter the error: {errs:?}");
        assert!(errs[1] / errs[2] > 3.0);
    }

    #[test]
    fn phi_numeric_converges_to_phi_commutative() {
        // Strong self-convergence against the explicit form, averaged over an
        // ensemble of refined paths: halving dt roughly halves the error.
        let m = model(dmatrix![0.5], vec![dmatrix![1.0]]);
        let mut errs = [0.0f64; 3];
        let n_paths = 24;
        for seed in 0..n_paths {
            let fine = sample_path(grid(0.0, 1e-3, 1000), 1, seed);
            let exact = phi(&m, &fine, 1.0, 0.0).unwrap();
            for (k, factor) in [4usize, 2, 1].into_iter().enumerate() {
                let p = fine.coarsen(factor).unwrap();
                let num = phi_numeric(&m, &p, 1.0, 0.0, 1).unwrap();
                errs[k] += (num - &exact).norm() / exact.norm();
            }
        }
        for e in errs.iter_mut() {
            *e /= n_paths as f64;
        }
        assert!(errs[0] / errs[1] > 1.5, "errors {errs:?}");
        assert!(errs[1] / errs[2] > 1.5, "errors {errs:?}");
        assert!(errs[2] < 2e-3, "final mean relative error {}", errs[2]);
    }

    #[test]
    fn phi_numeric_substeps_refine_deterministic_case() {
        // With substeps the coarse grid is refined by linear interpolation of
        // the increments; the deterministic error shrinks accordingly.
        let a = dmatrix![-1.0, 0.4; -0.3, -0.6];
        let m = model(a.clone(), vec![]);
        let p = BrownianPath::zero(grid(0.0, 0.25, 4), 0);
        let exact = expm(&a);
        let coarse = (phi_numeric(&m, &p, 1.0, 0.0, 1).unwrap() - &exact).norm();
        let refined = (phi_numeric(&m, &p, 1.0, 0.0, 8).unwrap() - &exact).norm();
        assert!(refined < coarse / 8.0, "coarse {coarse}, refined {refined}");
    }

    #[test]
    fn phi_numeric_inverse_relation() {
        let m = model(dmatrix![-0.5, 0.2; 0.2, -0.5], vec![dmatrix![0.3, 0.1; 0.1, 0.3]]);
        let g = grid(0.0, 1e-3, 1000);
        let p = sample_path(g, 1, 21);
        let u = 0.5;
        let s = 0.2;
        let fwd = phi_numeric(&m, &p, u, s, 1).unwrap();
        let bwd = phi_numeric(&m, &p, -u, s + u, 1).unwrap();
        let prod = bwd * fwd;
        let err = (&prod - DMatrix::<f64>::identity(2, 2)).norm();
        assert!(err < 5e-3, "inverse product deviates from identity by {err}");
    }

    #[test]
    fn truncation_branches() {
        let m = model(dmatrix![-1.0, 0.0; 0.0, 2.0], vec![dmatrix![0.5, 0.0; 0.0, 0.5]]);
        let d = build_dichotomy(&m, None, None).unwrap();
        let p = sample_path(grid(-2.0, 0.1, 40), 1, 13);
        let u = 1.0;
        let s = -1.0;
        let raw = phi(&m, &p, u, s).unwrap() * &d.p_minus;
        // Large N: the min branch is 1 and the output is the raw projection.
        let big = phi_truncated(&m, &p, &d, u, s, 1000, TruncationSign::Minus).unwrap();
        assert_relative_eq!(big, raw, epsilon = 1e-12);
        // N = 1 with a tight envelope: the bound holds by construction.
        let small = phi_truncated(&m, &p, &d, u, s, 1, TruncationSign::Minus).unwrap();
        let env = 1.0 * (0.5 * (-1.0) * u).exp() * (d.lambda * s.abs()).exp();
        assert!(small.norm() <= env * (1.0 + 1e-12));
        assert!(matches!(
            phi_truncated(&m, &p, &d, -1.0, s, 1, TruncationSign::Minus),
            Err(Error::SignMismatch { .. })
        ));
    }

    #[test]
    fn tempered_stat_deterministic_diag() {
        let m = model(dmatrix![-1.0, 0.0; 0.0, 2.0], vec![]);
        let d = build_dichotomy(&m, None, None).unwrap();
        let p = BrownianPath::zero(grid(-2.0, 0.05, 80), 0);
        let stat = temperedness_stat(&m, &p, &d);
        // ||e^{At}P^-|| e^{t/2} = e^{-t/2} and ||e^{At}P^+|| e^{-... } peak at t=0, s=0.
        assert_relative_eq!(stat, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn tempered_stat_lower_bound_and_selection() {
        let m = model(dmatrix![-1.0, 0.0; 0.0, 2.0], vec![dmatrix![0.3, 0.0; 0.0, 0.3]]);
        let d = build_dichotomy(&m, None, None).unwrap();
        let p = sample_path(grid(-2.0, 0.05, 80), 1, 31);
        let stat = temperedness_stat(&m, &p, &d);
        assert!(stat >= 1.0 - 1e-12);
        assert_eq!(select_truncation_level(1.0), 1);
        assert_eq!(select_truncation_level(3.2), 4);

        // With N selected from the stat, the truncation is inactive on every pair.
        let n_level = select_truncation_level(stat);
        for i in (0..=p.grid.n_steps).step_by(4) {
            let s = p.grid.time(i);
            for j in (i..=p.grid.n_steps).step_by(4) {
                let u = (j - i) as f64 * p.grid.dt;
                let tr = phi_truncated(&m, &p, &d, u, s, n_level, TruncationSign::Minus).unwrap();
                let raw = phi(&m, &p, u, s).unwrap() * &d.p_minus;
                assert_relative_eq!(tr, raw, epsilon = 1e-13);
                let tr_p = phi_truncated(&m, &p, &d, -u, s + u, n_level, TruncationSign::Plus).unwrap();
                let raw_p = phi(&m, &p, -u, s + u).unwrap() * &d.p_plus;
                assert_relative_eq!(tr_p, raw_p, epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn tempered_stat_shift_comparability() {
        // stat(shift(p, k tau)) stays within e^{Lambda k tau} of stat(p)
        // when both are evaluated on the overlapping window.
        let m = model(dmatrix![-1.0], vec![dmatrix![0.5]]);
        let d = build_dichotomy(&m, None, None).unwrap();
        let tau = 1.0;
        let p = sample_path(grid(-4.0, 0.05, 160), 1, 3);
        let q = p.shift(tau).unwrap();
        let sp = temperedness_stat(&m, &p, &d);
        let sq = temperedness_stat(&m, &q, &d);
        let factor = (d.lambda * tau).exp() * (d.lambda * 4.0).exp();
        assert!(sq <= sp * factor * 1.5 && sp <= sq * factor * 1.5, "sp={sp} sq={sq}");
    }

    #[test]
    fn malliavin_indicator_and_plain_branch() {
        let m = model(dmatrix![-1.0], vec![dmatrix![1.0]]);
        let d = build_dichotomy(&m, None, None).unwrap();
        let p = sample_path(grid(-1.0, 0.1, 30), 1, 8);
        let (u, s) = (1.0, 0.0);
        // r outside [s, s+u] is zero.
        let z = malliavin_phi(&m, &p, &d, u, s, 0, -0.5, 100, TruncationSign::Minus).unwrap();
        assert_eq!(z, DMatrix::zeros(1, 1));
        // Truncation not binding: exactly B_l Phi P^-.
        let v = malliavin_phi(&m, &p, &d, u, s, 0, 0.5, 100, TruncationSign::Minus).unwrap();
        let expect = &m.b[0] * (phi(&m, &p, u, s).unwrap() * &d.p_minus);
        assert_relative_eq!(v, expect, epsilon = 1e-12);
    }

    #[test]
    fn malliavin_bound_holds() {
        let m = model(dmatrix![-1.0, 0.0; 0.0, 2.0], vec![dmatrix![0.7, 0.0; 0.0, 0.7]]);
        let d = build_dichotomy(&m, None, None).unwrap();
        let p = sample_path(grid(-2.0, 0.1, 45), 1, 4);
        let bnorm = m.noise_norm();
        let dcube = 1.0 + 8.0;
        for n_level in [1usize, 2, 5] {
            for &(u, s) in &[(0.5, -1.0), (1.5, 0.0), (2.0, 0.5)] {
                let v = malliavin_phi(&m, &p, &d, u, s, 0, s + 0.5 * u, n_level, TruncationSign::Minus)
                    .unwrap();
                let bound = dcube
                    * bnorm
                    * n_level as f64
                    * (0.5 * d.rate_minus() * u).exp()
                    * (d.lambda * s.abs()).exp();
                assert!(v.norm() <= bound * (1.0 + 1e-10), "u={u} s={s} N={n_level}");
            }
        }
    }

    #[test]
    fn lyapunov_examples() {
        // Deterministic: x in an eigenspace recovers the eigenvalue exactly.
        let m = model(dmatrix![-1.0, 0.0; 0.0, 2.0], vec![]);
        let l1 = lyapunov_estimate(&m, &[1], &dvector![1.0, 0.0], 10.0, 0.1);
        assert_relative_eq!(l1, -1.0, epsilon = 1e-12);
        // Second coordinate decoupled from noise on the first.
        let mn = model(dmatrix![-1.0, 0.0; 0.0, 2.0], vec![dmatrix![10.0, 0.0; 0.0, 0.0]]);
        let l2 = lyapunov_estimate(&mn, &(0..64).collect::<Vec<_>>(), &dvector![0.0, 1.0], 20.0, 0.1);
        assert_relative_eq!(l2, 2.0, epsilon = 1e-9);
        // Scalar with noise: estimate -> a with sampling error O(|b|/sqrt(T)).
        let ms = model(dmatrix![-0.5], vec![dmatrix![1.0]]);
        let seeds: Vec<u64> = (0..200).collect();
        let l3 = lyapunov_estimate(&ms, &seeds, &dvector![1.0], 50.0, 0.5);
        assert!((l3 + 0.5).abs() < 3.0 * 1.0 / (50.0f64 * 200.0).sqrt(), "l3 = {l3}");
    }

    #[test]
    fn mixed_spectrum_noncommutative_rejected() {
        let m = model(dmatrix![1.0, 2.0; 0.0, -1.0], vec![dmatrix![1.0, 0.0; 0.0, 0.0]]);
        assert!(!m.is_commutative());
        let d = build_dichotomy(&m, None, None).unwrap();
        assert!(d.mu_minus.is_some() && d.mu_plus.is_some());
        assert!(matches!(require_projectable(&m, &d), Err(Error::NonCommutativeMixedSpectrum)));
    }
}
