//! Library surface of the command-line front end, exposed so integration
//! tests can drive the commands directly.

pub mod commands;
pub mod scenario;

use anyhow::Result;
use std::path::Path;

pub use commands::{
    cmd_measure, cmd_simulate, cmd_solve, cmd_spectrum, cmd_verify, MeasureSummary,
    SpectrumSummary, VerifySummary,
};
pub use scenario::{Assembled, Scenario};

/// Load a scenario by builtin name or from a JSON config file, with CLI
/// overrides applied before assembly.
#[derive(Default)]
pub struct Overrides {
    pub seeds: Option<Vec<u64>>,
    pub dt: Option<f64>,
    pub horizon: Option<f64>,
    pub tol: Option<f64>,
    pub t_core: Option<f64>,
}

pub fn load_scenario(
    builtin: Option<&str>,
    config: Option<&Path>,
    overrides: &Overrides,
) -> Result<Assembled> {
    let mut sc = match (builtin, config) {
        (Some(name), None) => Scenario::builtin(name)?,
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path)?;
            Scenario::from_json(&text)?
        }
        (Some(_), Some(_)) => anyhow::bail!("pass either --scenario or --config, not both"),
        (None, None) => anyhow::bail!("one of --scenario or --config is required"),
    };
    if let Some(seeds) = &overrides.seeds {
        sc.seeds = seeds.clone();
    }
    if sc.seeds.is_empty() {
        sc.seeds = vec![1];
    }
    if let Some(dt) = overrides.dt {
        sc.solver.dt = dt;
    }
    if let Some(h) = overrides.horizon {
        sc.solver.horizon = h;
    }
    if let Some(tol) = overrides.tol {
        sc.solver.tol = tol;
    }
    if let Some(t) = overrides.t_core {
        sc.solver.t_core = t;
    }
    sc.assemble()
}

/// Exit-code contract: distinct codes per failure class so CI scripts can
/// tell a non-convergent solve from a misconfigured model.
pub fn exit_code_for(err: &anyhow::Error) -> i32 {
    if let Some(core) = err.downcast_ref::<rps_core::Error>() {
        return match core {
            rps_core::Error::Config(_) | rps_core::Error::InvalidGrid(_) => 2,
            rps_core::Error::NotHyperbolic { .. } => 3,
            rps_core::Error::NonCommutativeMixedSpectrum | rps_core::Error::NonCommutative => 4,
            rps_core::Error::MaxIterExceeded { .. } => 5,
            rps_core::Error::NotDissipative => 6,
            _ => 1,
        };
    }
    if err.downcast_ref::<serde_json::Error>().is_some() {
        return 2;
    }
    1
}
