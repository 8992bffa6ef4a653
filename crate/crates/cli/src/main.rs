//! `dpflow` command-line interface.
//!
//! Exit codes: 0 success, 1 runtime or data error, 2 configuration or usage
//! error, 3 file-system error, 4 non-convergence. Failures print one JSON
//! object on stderr with `error`, `exit_code` and `message` fields.

mod config;
mod error;
mod output;
mod pipeline;
mod reproduce;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dpflow::cvsim::CVSimParams;
use dpflow::divergences::{rho_grid, rho_star, write_rho_star_row, Metric, RHO_LIMIT, RHO_STEP};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result, EXIT_CONFIG, EXIT_NON_CONVERGENCE};
use crate::output::{resolve_dir, Manifest};
use crate::pipeline::AccountantQuery;
use crate::reproduce::{Experiment, ReproduceOptions};

#[derive(Parser)]
#[command(name = "dpflow", version, about = "Normalizing flows under Gaussian differential privacy")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert between mu-GDP, noise multiplier and (epsilon, delta).
    Accountant(AccountantArgs),
    /// Simulate a data set.
    Simulate(SimulateArgs),
    /// Six-compartment circulation model.
    Cvsim {
        #[command(subcommand)]
        command: CvsimCommand,
    },
    /// Divergences between equicorrelated bivariate Gaussians.
    Metrics {
        #[command(subcommand)]
        command: MetricsCommand,
    },
    /// Run an experiment described by a key = value config file.
    Run(RunArgs),
    /// Re-run one of the pinned experiments.
    Reproduce(ReproduceArgs),
}

#[derive(Args)]
struct AccountantArgs {
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    /// Poisson subsampling rate.
    #[arg(long)]
    rate: f64,
    /// Number of iterations.
    #[arg(long)]
    iters: usize,
}

#[derive(Args)]
struct SimulateArgs {
    /// Only `regression` is available.
    #[arg(long, default_value = "regression")]
    task: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum CvsimCommand {
    /// Simulate at the default parameters; writes history.csv and outputs.json.
    Run {
        #[arg(long, default_value_t = 10)]
        cycles: usize,
        #[arg(long, default_value_t = 1e-3)]
        dt: f64,
        /// Override the arterial resistance R_ro.
        #[arg(long)]
        r_ro: Option<f64>,
        /// Override the arterial capacitance C_a.
        #[arg(long)]
        c_a: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate a batch of Sobol points over the default (R_ro, C_a) bounds.
    Sweep {
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        start: u32,
        #[arg(long, default_value_t = 10)]
        cycles: usize,
        #[arg(long, default_value_t = 1e-3)]
        dt: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum MetricsCommand {
    /// Loss surface over (rho, sigma) and its minimizer trace.
    Grid {
        #[arg(long)]
        metric: Metric,
        #[arg(long)]
        rho0: f64,
        #[arg(long, default_value_t = 1.0)]
        sigma0: f64,
        #[arg(long, default_value_t = 199)]
        rho_points: usize,
        #[arg(long, default_value_t = 36)]
        sigma_points: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Minimizing correlation at given sigma-hat values; CSV on stdout.
    RhoStar {
        #[arg(long)]
        metric: Metric,
        #[arg(long)]
        rho0: f64,
        #[arg(long, default_value_t = 1.0)]
        sigma0: f64,
        #[arg(long = "sigma-hat", required = true, num_args = 1..)]
        sigma_hat: Vec<f64>,
    },
}

#[derive(Args)]
struct RunArgs {
    config: PathBuf,
    /// Number of synthetic data sets to release (synth task).
    #[arg(long)]
    num_datasets: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReproduceArgs {
    /// accountant-pairs, cvsim-defaults, metrics-fig5, vi-table7 or synthetic-vi-table8.
    name: String,
    #[arg(long, default_value_t = 5)]
    seeds: usize,
    /// Override the iteration count of every training run.
    #[arg(long)]
    iters: Option<usize>,
    /// Override the Monte Carlo sample count of VI runs.
    #[arg(long)]
    mc_samples: Option<usize>,
    #[arg(long, default_value_t = 20_000)]
    posterior_draws: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn finish(m: &Manifest, dir: &std::path::Path) -> Result<()> {
    let p = m.write(dir)?;
    println!("{}", p.display());
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Accountant(a) => {
            let r = pipeline::accountant(&AccountantQuery {
                mu: a.mu,
                sigma: a.sigma,
                eps: a.eps,
                delta: a.delta,
                rate: a.rate,
                iterations: a.iters,
            })?;
            println!("{}", serde_json::to_string_pretty(&r).map_err(|e| CliError::Runtime(e.to_string()))?);
            Ok(())
        }
        Command::Simulate(s) => {
            if s.task != "regression" {
                return Err(CliError::key("task", format!("unknown simulation task '{}' (expected regression)", s.task)));
            }
            let dir = resolve_dir(s.out.as_deref(), &format!("simulate-regression-seed{}", s.seed))?;
            let mut m = Manifest::new("simulate", serde_json::json!({"task": s.task}), Some(s.seed));
            pipeline::simulate_task(s.seed, &dir, &mut m)?;
            finish(&m, &dir)
        }
        Command::Cvsim { command } => match command {
            CvsimCommand::Run { cycles, dt, r_ro, c_a, out } => {
                let mut params = CVSimParams::default();
                if let Some(r) = r_ro {
                    params.r_ro = r;
                }
                if let Some(c) = c_a {
                    params.c_a = c;
                }
                let dir = resolve_dir(out.as_deref(), "cvsim-run")?;
                let mut m = Manifest::new(
                    "cvsim run",
                    serde_json::json!({"cycles": cycles, "dt": dt, "params": params}),
                    None,
                );
                pipeline::cvsim_run(params, cycles, dt, &dir, &mut m)?;
                finish(&m, &dir)
            }
            CvsimCommand::Sweep { n, start, cycles, dt, out } => {
                let dir = resolve_dir(out.as_deref(), "cvsim-sweep")?;
                let mut m = Manifest::new(
                    "cvsim sweep",
                    serde_json::json!({"n": n, "start": start, "cycles": cycles, "dt": dt}),
                    None,
                );
                pipeline::cvsim_sweep(start, n, cycles, dt, &dir, &mut m)?;
                finish(&m, &dir)
            }
        },
        Command::Metrics { command } => match command {
            MetricsCommand::Grid {
                metric,
                rho0,
                sigma0,
                rho_points,
                sigma_points,
                out,
            } => {
                let dir = resolve_dir(out.as_deref(), &format!("metrics-{metric}"))?;
                let mut m = Manifest::new(
                    "metrics grid",
                    serde_json::json!({"metric": metric, "rho0": rho0, "sigma0": sigma0,
                        "rho_points": rho_points, "sigma_points": sigma_points}),
                    None,
                );
                pipeline::metrics_grid(metric, rho0, sigma0, rho_points, sigma_points, &dir, &mut m)?;
                finish(&m, &dir)
            }
            MetricsCommand::RhoStar {
                metric,
                rho0,
                sigma0,
                sigma_hat,
            } => {
                let grid = rho_grid(RHO_LIMIT, RHO_STEP)?;
                let mut out = std::io::stdout().lock();
                use std::io::Write;
                writeln!(out, "metric,rho0,sigma0,sigma,rho_star,value,unique,ties")
                    .map_err(|e| CliError::Runtime(e.to_string()))?;
                for s in sigma_hat {
                    write_rho_star_row(&mut out, &rho_star(metric, rho0, sigma0, s, &grid)?)?;
                }
                Ok(())
            }
        },
        Command::Run(r) => {
            let mut cfg = ExperimentConfig::load(&r.config)?;
            if let Some(k) = r.num_datasets {
                cfg.num_datasets = k;
                cfg.validate()?;
            }
            let name = format!("{:?}-seed{}", cfg.task, cfg.seed).to_lowercase();
            let explicit = r.out.or_else(|| cfg.output.clone());
            let dir = resolve_dir(explicit.as_deref(), &name)?;
            let res = pipeline::run_task(&cfg, &dir, "run")?;
            finish(&res.manifest, &dir)?;
            if res.converged {
                Ok(())
            } else {
                Err(CliError::NonConvergence(
                    "training loss stayed far above its starting value; artifacts were written for inspection".into(),
                ))
            }
        }
        Command::Reproduce(a) => {
            let exp: Experiment = a.name.parse()?;
            let dir = resolve_dir(a.out.as_deref(), &format!("reproduce-{}", exp.name()))?;
            let opts = ReproduceOptions {
                seeds: a.seeds,
                iterations: a.iters,
                mc_samples: a.mc_samples,
                posterior_draws: a.posterior_draws,
            };
            let m = reproduce::reproduce(exp, &opts, &dir)?;
            finish(&m, &dir)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let err = CliError::config(e.to_string().trim().to_string());
            eprintln!("{}", err.to_json());
            return ExitCode::from(EXIT_CONFIG as u8);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            debug_assert!(e.exit_code() <= EXIT_NON_CONVERGENCE);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
