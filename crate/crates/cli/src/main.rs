use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use rps_cli::{exit_code_for, load_scenario, Overrides};
use std::path::PathBuf;
use std::process::ExitCode;

/// Random periodic solutions of periodic SDEs: solve the forward-backward
/// integral equation, simulate trajectories, verify the defining identities,
/// estimate periodic measures and report the dichotomy spectrum.
#[derive(Parser)]
#[command(name = "rps", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Builtin scenario name: ou_periodic | mult_linear_scalar |
    /// hyperbolic_2d | limit_cycle_additive | limit_cycle_mult.
    #[arg(long)]
    scenario: Option<String>,
    /// Scenario JSON file (alternative to --scenario).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Single seed (shorthand for --seeds with one entry).
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated seed list overriding the scenario seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Override the solver step.
    #[arg(long)]
    dt: Option<f64>,
    /// Override the integration horizon H.
    #[arg(long)]
    horizon: Option<f64>,
    /// Override the fixed-point tolerance.
    #[arg(long)]
    tol: Option<f64>,
    /// Override the reported core half-window T.
    #[arg(long)]
    t_core: Option<f64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl Common {
    fn overrides(&self) -> Overrides {
        let seeds = self.seeds.clone().or_else(|| self.seed.map(|s| vec![s]));
        Overrides {
            seeds,
            dt: self.dt,
            horizon: self.horizon,
            tol: self.tol,
            t_core: self.t_core,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Solve the integral equation per seed; writes solution CSVs and reports.
    Solve {
        #[command(flatten)]
        common: Common,
    },
    /// Forward SDE trajectory with the noiseless reference overlay.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// End time of the trajectory.
        #[arg(long, default_value_t = 50.0)]
        t_end: f64,
    },
    /// Run the verification suite; exit 1 if any check fails.
    Verify {
        #[command(flatten)]
        common: Common,
    },
    /// Evolve a uniform initial cloud under one shared path and snapshot it.
    Measure {
        #[command(flatten)]
        common: Common,
        /// Number of cloud points.
        #[arg(long, default_value_t = 400)]
        n: usize,
        /// Snapshot times, comma separated.
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 2.0, 5.0, 20.0])]
        times: Vec<f64>,
        /// Half-width of the initial uniform box.
        #[arg(long, default_value_t = 2.0)]
        box_half: f64,
    },
    /// Dichotomy report and Lyapunov estimates.
    Spectrum {
        #[command(flatten)]
        common: Common,
        /// Averaging horizon for the Lyapunov estimates.
        #[arg(long, default_value_t = 50.0)]
        t_horizon: f64,
    },
}

fn run() -> Result<bool> {
    let cli = Cli::parse();
    match cli.command {
        Command::Solve { common } => {
            let asm = load_scenario(common.scenario.as_deref(), common.config.as_deref(), &common.overrides())?;
            let reports = rps_cli::cmd_solve(&asm, &common.out)?;
            for (seed, rep) in asm.scenario.seeds.iter().zip(reports.iter()) {
                println!(
                    "seed {seed}: converged in {} iterations, residual {:.3e}, N = {:.3e}",
                    rep.iterations, rep.final_residual, rep.n_level
                );
            }
            Ok(true)
        }
        Command::Simulate { common, t_end } => {
            let asm = load_scenario(common.scenario.as_deref(), common.config.as_deref(), &common.overrides())?;
            let seed = asm.scenario.seeds.first().copied().unwrap_or(1);
            let file = rps_cli::cmd_simulate(&asm, seed, t_end, &common.out)?;
            println!("wrote {}", file.display());
            Ok(true)
        }
        Command::Verify { common } => {
            let asm = load_scenario(common.scenario.as_deref(), common.config.as_deref(), &common.overrides())?;
            let summary = rps_cli::cmd_verify(&asm, &common.out)?;
            for c in &summary.checks {
                println!(
                    "{}: value {:.3e} tolerance {:.3e} [{}]",
                    c.name,
                    c.value,
                    c.tolerance,
                    if c.pass { "pass" } else { "FAIL" }
                );
            }
            Ok(summary.pass)
        }
        Command::Measure { common, n, times, box_half } => {
            let asm = load_scenario(common.scenario.as_deref(), common.config.as_deref(), &common.overrides())?;
            let seed = asm.scenario.seeds.first().copied().unwrap_or(1);
            let summary = rps_cli::cmd_measure(&asm, n, &times, seed, box_half, &common.out)?;
            for (t, (file, conc)) in summary
                .times
                .iter()
                .zip(summary.files.iter().zip(summary.curve_concentration.iter()))
            {
                println!("t = {t}: {file} (curve concentration {conc:.3})");
            }
            Ok(true)
        }
        Command::Spectrum { common, t_horizon } => {
            let asm = load_scenario(common.scenario.as_deref(), common.config.as_deref(), &common.overrides())?;
            let summary = rps_cli::cmd_spectrum(&asm, t_horizon, &common.out)?;
            for l in &summary.lyapunov {
                println!("eigenvalue {:.6}: Lyapunov estimate {:.6}", l.eigenvalue, l.estimate);
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code_for(&err) as u8)
        }
    }
}
