//! Periodic drift fields F(t, x), additive-noise coefficients beta_k(t),
//! deterministic periodic orbits, and the reduction of an SDE about a
//! noiseless periodic orbit to the zero-centered periodic form.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use std::sync::Arc;

type EvalFn = Arc<dyn Fn(f64, &DVector<f64>) -> DVector<f64> + Send + Sync>;
type JacFn = Arc<dyn Fn(f64, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// A tau-periodic drift field with optional analytic Jacobian and bounds.
#[derive(Clone)]
pub struct PeriodicField {
    pub tau: f64,
    pub dim: usize,
    pub family: String,
    eval: EvalFn,
    jac: Option<JacFn>,
    pub lip_bound: Option<f64>,
    pub sup_bound: Option<f64>,
}

impl std::fmt::Debug for PeriodicField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PeriodicField")
            .field("tau", &self.tau)
            .field("dim", &self.dim)
            .field("family", &self.family)
            .field("lip_bound", &self.lip_bound)
            .field("sup_bound", &self.sup_bound)
            .finish()
    }
}

impl PeriodicField {
    pub fn new(
        tau: f64,
        dim: usize,
        family: impl Into<String>,
        eval: EvalFn,
        jac: Option<JacFn>,
        lip_bound: Option<f64>,
        sup_bound: Option<f64>,
    ) -> Self {
        PeriodicField { tau, dim, family: family.into(), eval, jac, lip_bound, sup_bound }
    }

    pub fn eval(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        (self.eval)(t, x)
    }

    /// Analytic Jacobian when present, otherwise central finite differences
    /// with step `1e-6 (1 + ||x||)`.
    pub fn jac(&self, t: f64, x: &DVector<f64>) -> DMatrix<f64> {
        if let Some(j) = &self.jac {
            return j(t, x);
        }
        self.jac_fd(t, x)
    }

    pub fn jac_fd(&self, t: f64, x: &DVector<f64>) -> DMatrix<f64> {
        let h = 1e-6 * (1.0 + x.norm());
        let mut out = DMatrix::zeros(self.dim, self.dim);
        for c in 0..self.dim {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[c] += h;
            xm[c] -= h;
            let fp = self.eval(t, &xp);
            let fm = self.eval(t, &xm);
            for r in 0..self.dim {
                out[(r, c)] = (fp[r] - fm[r]) / (2.0 * h);
            }
        }
        out
    }

    pub fn has_analytic_jac(&self) -> bool {
        self.jac.is_some()
    }

    /// Supremum and Lipschitz bounds, estimated by sampling when absent.
    /// Used only for horizon and damping heuristics.
    pub fn bounds_or_estimate(&self) -> (f64, f64) {
        match (self.sup_bound, self.lip_bound) {
            (Some(s), Some(l)) => (s, l),
            _ => {
                let (s_est, l_est) = self.estimate_bounds(3.0, 10_000);
                (self.sup_bound.unwrap_or(s_est), self.lip_bound.unwrap_or(l_est))
            }
        }
    }

    /// Sample `n` points with t uniform in [0, tau] and x uniform in
    /// [-box_half, box_half]^d; return (max |F|, max ||dF/dx||).
    pub fn estimate_bounds(&self, box_half: f64, n: usize) -> (f64, f64) {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(0x6f72_6269);
        let mut sup = 0.0f64;
        let mut lip = 0.0f64;
        for _ in 0..n {
            let t = rng.gen_range(0.0..self.tau);
            let x = DVector::from_fn(self.dim, |_, _| rng.gen_range(-box_half..box_half));
            sup = sup.max(self.eval(t, &x).norm());
            lip = lip.max(self.jac(t, &x).norm());
        }
        (sup, lip)
    }
}

type NoiseFn = Arc<dyn Fn(f64) -> Vec<DVector<f64>> + Send + Sync>;

/// tau-periodic additive noise coefficients beta_k(t), one vector per channel.
#[derive(Clone)]
pub struct AdditiveNoise {
    pub tau: f64,
    pub dim: usize,
    pub channels: usize,
    eval: NoiseFn,
    /// Constant R_1 in ||beta_k(s1) - beta_k(s2)||^2 <= R_1 |s1 - s2|.
    pub lipschitz_sq: Option<f64>,
}

impl std::fmt::Debug for AdditiveNoise {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AdditiveNoise")
            .field("tau", &self.tau)
            .field("dim", &self.dim)
            .field("channels", &self.channels)
            .finish()
    }
}

impl AdditiveNoise {
    pub fn new(tau: f64, dim: usize, channels: usize, eval: NoiseFn) -> Self {
        AdditiveNoise { tau, dim, channels, eval, lipschitz_sq: None }
    }

    pub fn eval(&self, t: f64) -> Vec<DVector<f64>> {
        (self.eval)(t)
    }

    pub fn zero(tau: f64, dim: usize, channels: usize) -> Self {
        AdditiveNoise::new(tau, dim, channels, Arc::new(move |_| vec![DVector::zeros(dim); channels]))
    }

    /// beta_1(t) = amp * sin(t) in one dimension (the additive benchmark coefficient).
    pub fn sine(amp: f64) -> Self {
        let mut n = AdditiveNoise::new(
            std::f64::consts::TAU,
            1,
            1,
            Arc::new(move |t: f64| vec![DVector::from_element(1, amp * t.sin())]),
        );
        n.lipschitz_sq = Some(amp * amp);
        n
    }

    /// Constant beta_k = gamma_k.
    pub fn constant(tau: f64, gammas: Vec<DVector<f64>>) -> Self {
        let dim = gammas.first().map_or(0, |g| g.len());
        let channels = gammas.len();
        let mut n = AdditiveNoise::new(tau, dim, channels, Arc::new(move |_t| gammas.clone()));
        n.lipschitz_sq = Some(0.0);
        n
    }
}

type OrbitFn = Arc<dyn Fn(f64) -> DVector<f64> + Send + Sync>;

/// A noiseless periodic orbit z(t) of dx/dt = A x + f(x), with velocity.
#[derive(Clone)]
pub struct DeterministicOrbit {
    pub tau: f64,
    pub dim: usize,
    eval: OrbitFn,
    velocity: OrbitFn,
}

impl std::fmt::Debug for DeterministicOrbit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DeterministicOrbit").field("tau", &self.tau).field("dim", &self.dim).finish()
    }
}

impl DeterministicOrbit {
    pub fn new(tau: f64, dim: usize, eval: OrbitFn, velocity: OrbitFn) -> Self {
        DeterministicOrbit { tau, dim, eval, velocity }
    }

    pub fn eval(&self, t: f64) -> DVector<f64> {
        (self.eval)(t)
    }

    pub fn velocity(&self, t: f64) -> DVector<f64> {
        (self.velocity)(t)
    }

    /// The unit circle z(t) = (cos t, sin t), period 2 pi.
    pub fn unit_circle() -> Self {
        DeterministicOrbit::new(
            std::f64::consts::TAU,
            2,
            Arc::new(|t: f64| DVector::from_vec(vec![t.cos(), t.sin()])),
            Arc::new(|t: f64| DVector::from_vec(vec![-t.sin(), t.cos()])),
        )
    }

    /// Max residual ||z'(t) - (A z(t) + f(t, z(t)))|| over a tau-grid.
    pub fn residual(&self, a: &DMatrix<f64>, f: &PeriodicField, n_grid: usize) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..n_grid {
            let t = self.tau * i as f64 / n_grid as f64;
            let z = self.eval(t);
            let r = (self.velocity(t) - (a * &z + f.eval(t, &z))).norm();
            worst = worst.max(r);
        }
        worst
    }
}

/// C2 cutoff: 1 on ||x||^2 <= r1sq, 0 on ||x||^2 >= r2sq, quintic Hermite
/// bridge in between; monotone in ||x||^2.
pub fn cutoff_phi(x: &DVector<f64>, r1sq: f64, r2sq: f64) -> Result<f64> {
    Ok(cutoff_phi_rsq(x.norm_squared(), r1sq, r2sq)?.0)
}

/// Cutoff and its derivative with respect to ||x||^2.
pub fn cutoff_phi_rsq(rsq: f64, r1sq: f64, r2sq: f64) -> Result<(f64, f64)> {
    if !(0.0 < r1sq && r1sq < r2sq) {
        return Err(Error::BadRadii { r1sq, r2sq });
    }
    if rsq <= r1sq {
        return Ok((1.0, 0.0));
    }
    if rsq >= r2sq {
        return Ok((0.0, 0.0));
    }
    let w = r2sq - r1sq;
    let z = (rsq - r1sq) / w;
    let s = z * z * z * (10.0 - 15.0 * z + 6.0 * z * z);
    let ds = 30.0 * z * z * (1.0 - z) * (1.0 - z);
    Ok((1.0 - s, -ds / w))
}

pub const DEFAULT_R1SQ: f64 = 1e6;
pub const DEFAULT_R2SQ: f64 = 2e6;

/// Builtin field families.
pub fn builtin_field(name: &str, params: &serde_json::Map<String, serde_json::Value>) -> Result<PeriodicField> {
    let get = |key: &str, default: f64| params.get(key).and_then(|v| v.as_f64()).unwrap_or(default);
    let tau = std::f64::consts::TAU;
    match name {
        "zero" => {
            let dim = get("dim", 1.0) as usize;
            Ok(PeriodicField::new(
                get("tau", tau),
                dim,
                "zero",
                Arc::new(move |_t, _x| DVector::zeros(dim)),
                Some(Arc::new(move |_t, _x| DMatrix::zeros(dim, dim))),
                Some(0.0),
                Some(0.0),
            ))
        }
        "cosine_forcing" => {
            let c = get("c", 1.0);
            let dim = get("dim", 1.0) as usize;
            Ok(PeriodicField::new(
                tau,
                dim,
                "cosine_forcing",
                Arc::new(move |t: f64, _x| DVector::from_element(dim, c * t.cos())),
                Some(Arc::new(move |_t, _x| DMatrix::zeros(dim, dim))),
                Some(0.0),
                Some(c.abs() * (dim as f64).sqrt()),
            ))
        }
        "limit_cycle" => {
            let r1sq = get("r1sq", DEFAULT_R1SQ);
            let r2sq = get("r2sq", DEFAULT_R2SQ);
            cutoff_phi_rsq(1.0, r1sq, r2sq)?;
            let eval = move |_t: f64, x: &DVector<f64>| {
                let rsq = x.norm_squared();
                let (p, _) = cutoff_phi_rsq(rsq, r1sq, r2sq).expect("radii validated");
                x * ((2.0 - rsq) * p)
            };
            let jac = move |_t: f64, x: &DVector<f64>| {
                let rsq = x.norm_squared();
                let (p, dp) = cutoff_phi_rsq(rsq, r1sq, r2sq).expect("radii validated");
                // d/dx [x g(|x|^2)] = g I + 2 g' x x^T with g = (2 - r^2) phi.
                let g = (2.0 - rsq) * p;
                let gp = -p + (2.0 - rsq) * dp;
                let d = x.len();
                let mut out = DMatrix::identity(d, d) * g;
                for r in 0..d {
                    for c in 0..d {
                        out[(r, c)] += 2.0 * gp * x[r] * x[c];
                    }
                }
                out
            };
            Ok(PeriodicField::new(tau, 2, "limit_cycle", Arc::new(eval), Some(Arc::new(jac)), None, None))
        }
        "sine_in_state" => {
            // kappa * sin(omega x) + c cos(t): a bounded genuinely nonlinear family.
            let kappa = get("kappa", 0.3);
            let omega = get("omega", 1.0);
            let c = get("c", 1.0);
            let dim = get("dim", 1.0) as usize;
            Ok(PeriodicField::new(
                tau,
                dim,
                "sine_in_state",
                Arc::new(move |t: f64, x: &DVector<f64>| {
                    DVector::from_fn(dim, |i, _| kappa * (omega * x[i]).sin() + c * t.cos())
                }),
                Some(Arc::new(move |_t, x: &DVector<f64>| {
                    DMatrix::from_fn(dim, dim, |r, cc| {
                        if r == cc { kappa * omega * (omega * x[r]).cos() } else { 0.0 }
                    })
                })),
                Some(kappa.abs() * omega.abs()),
                Some(((kappa.abs() + c.abs()) * dim as f64).sqrt() * (kappa.abs() + c.abs()).sqrt()),
            ))
        }
        other => Err(Error::UnknownFamily(other.to_string())),
    }
}

/// Convenience builder with params given as pairs.
pub fn builtin_field_with(name: &str, params: &[(&str, f64)]) -> Result<PeriodicField> {
    let mut map = serde_json::Map::new();
    for (k, v) in params {
        map.insert((*k).to_string(), serde_json::json!(v));
    }
    builtin_field(name, &map)
}

/// Reduction about a deterministic periodic orbit (the change of variables
/// u = x - z(t)): returns G(t, u) = f(u + z(t)) - f(z(t)) and
/// beta_k(t) = B_k z(t) + gamma_k.
pub fn reduce_about_orbit(
    a: &DMatrix<f64>,
    f: &PeriodicField,
    z: &DeterministicOrbit,
    b: &[DMatrix<f64>],
    gamma: &[DVector<f64>],
    orbit_tol: f64,
) -> Result<(PeriodicField, AdditiveNoise)> {
    let res = z.residual(a, f, 256);
    if res > orbit_tol {
        return Err(Error::OrbitResidualTooLarge { residual: res, tol: orbit_tol });
    }
    let tau = z.tau;
    let dim = z.dim;
    let fe = f.clone();
    let ze = z.clone();
    let eval = move |t: f64, u: &DVector<f64>| {
        let zt = ze.eval(t);
        fe.eval(t, &(u + &zt)) - fe.eval(t, &zt)
    };
    let fj = f.clone();
    let zj = z.clone();
    let jac = move |t: f64, u: &DVector<f64>| fj.jac(t, &(u + zj.eval(t)));
    let g = PeriodicField::new(
        tau,
        dim,
        format!("{}-about-orbit", f.family),
        Arc::new(eval),
        Some(Arc::new(jac)),
        f.lip_bound,
        None,
    );

    let b: Vec<DMatrix<f64>> = b.to_vec();
    let gamma: Vec<DVector<f64>> = gamma.to_vec();
    let channels = b.len().max(gamma.len());
    let zb = z.clone();
    let beta_eval = move |t: f64| {
        let zt = zb.eval(t);
        (0..channels)
            .map(|k| {
                let mut v = gamma.get(k).cloned().unwrap_or_else(|| DVector::zeros(zt.len()));
                if let Some(bk) = b.get(k) {
                    v += bk * &zt;
                }
                v
            })
            .collect()
    };
    let beta = AdditiveNoise::new(tau, dim, channels, Arc::new(beta_eval));
    Ok((g, beta))
}
