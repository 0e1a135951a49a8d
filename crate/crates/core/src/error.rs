use thiserror::Error;

/// Errors shared across the whole crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("shift of {shift} is not an integer multiple of dt = {dt}")]
    NonGridShift { shift: f64, dt: f64 },
    #[error("shift of {shift} leaves no overlap with the sampled window [{t_start}, {t_end}]")]
    WindowExceeded { shift: f64, t_start: f64, t_end: f64 },
    #[error("time {t} is not a grid point (t_start = {t_start}, dt = {dt})")]
    OffGrid { t: f64, t_start: f64, dt: f64 },
    #[error("model is not commutative; the explicit cocycle form is invalid")]
    NonCommutative,
    #[error("non-commutative model with mixed spectrum: projectors are unavailable")]
    NonCommutativeMixedSpectrum,
    #[error("symmetric part of A has an eigenvalue {eigenvalue} within {gap_tol} of zero")]
    NotHyperbolic { eigenvalue: f64, gap_tol: f64 },
    #[error("truncation sign {sign:?} incompatible with elapsed time {u}")]
    SignMismatch { sign: crate::cocycle::TruncationSign, u: f64 },
    #[error("cutoff radii must satisfy 0 < r1sq < r2sq, got r1sq = {r1sq}, r2sq = {r2sq}")]
    BadRadii { r1sq: f64, r2sq: f64 },
    #[error("unknown builtin family `{0}`")]
    UnknownFamily(String),
    #[error("orbit residual {residual} exceeds tolerance {tol}")]
    OrbitResidualTooLarge { residual: f64, tol: f64 },
    #[error("spectrum is not entirely negative (P+ != 0): pull-back is invalid, solve the integral equation instead")]
    NotDissipative,
    #[error("fixed-point iteration did not converge after {iterations} iterations (last residual {last_residual:e}, tol {tol:e})")]
    MaxIterExceeded {
        iterations: usize,
        last_residual: f64,
        tol: f64,
        report: Box<crate::ihrie::SolveReport>,
    },
    #[error("state became non-finite or exceeded 1e12 at t = {t}")]
    NonFinite { t: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
