//! Task implementations shared by `run`, the direct subcommands and
//! `reproduce`.

use std::path::Path;

use dpflow::cvsim::{
    simulate, sobol_design, train_surrogate, CVSimParams, History, ParamBounds, Simulator, Surrogate,
    SurrogateConfig, SurrogateTarget, OUTPUT_NAMES,
};
use dpflow::datasim::{
    load_table, read_header, read_raw, simulate_regression, truncate_to_bounds, AttributeSchema,
    RegressionSpec, RegressionTarget, Table,
};
use dpflow::divergences::{contour_grid, linspace, Metric};
use dpflow::flows::{Direction, FlowConfig, FlowModel};
use dpflow::ndiff::Tensor;
use dpflow::privacy::{
    delta_from_eps_mu, eps_from_delta_mu, mu_from_eps_delta, mu_total, sigma_from_mu,
};
use dpflow::train::{fit_density, fit_vi, summarize, SampleSummary, TargetPosterior, TrainConfig, TrainReport};
use serde::Serialize;
use serde_json::json;

use crate::config::{ExperimentConfig, SchemaKind, Task, ViModel};
use crate::error::{CliError, Result};
use crate::output::{write_csv, write_json, write_records, write_trace, Manifest};

/// Outcome of a task: the manifest is complete except for `created`, and
/// `converged` is false when training ended in a sustained loss blow-up.
pub struct TaskResult {
    pub manifest: Manifest,
    pub converged: bool,
}

pub fn run_task(cfg: &ExperimentConfig, dir: &Path, command: &str) -> Result<TaskResult> {
    let config = serde_json::to_value(cfg).map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut m = Manifest::new(command, config, Some(cfg.seed));
    let mut converged = true;
    match cfg.task {
        Task::Density | Task::Synth => converged = density_task(cfg, dir, &mut m)?,
        Task::Vi => converged = vi_task(cfg, dir, &mut m)?,
        Task::Cvsim => cvsim_run(CVSimParams::default(), cfg.cycles, cfg.dt, dir, &mut m)?,
        Task::Surrogate => surrogate_task(cfg, dir, &mut m)?,
        Task::Metrics => metrics_grid(cfg.metric, cfg.rho0, cfg.sigma0, 199, 36, dir, &mut m)?,
        Task::Simulate => simulate_task(cfg.seed, dir, &mut m)?,
        Task::Accountant => {
            let q = AccountantQuery {
                mu: cfg.mu,
                sigma: cfg.sigma,
                eps: None,
                delta: None,
                rate: cfg.poisson_rate.unwrap_or(1.0),
                iterations: cfg.iter_no,
            };
            let a = accountant(&q)?;
            let p = dir.join("accountant.json");
            write_json(&p, &a)?;
            m.metric("accountant", a);
            m.artifact(&p);
        }
    }
    m.metric("converged", converged);
    Ok(TaskResult { manifest: m, converged })
}

fn schema_for(kind: SchemaKind, input: &Path) -> Result<AttributeSchema> {
    Ok(match kind {
        SchemaKind::None => AttributeSchema::unbounded(&read_header(input).map_err(|e| map_read(input, e))?),
        SchemaKind::Ehr => AttributeSchema::ehr(),
        SchemaKind::Regression => AttributeSchema::regression(&RegressionSpec::default()),
    })
}

fn map_read(path: &Path, e: dpflow::datasim::DatasimError) -> CliError {
    match e {
        dpflow::datasim::DatasimError::Io(err) => CliError::io(path, err),
        dpflow::datasim::DatasimError::Csv(err) if err.is_io_error() => CliError::io(path, err),
        other => other.into(),
    }
}

fn require_input(cfg: &ExperimentConfig) -> Result<&Path> {
    cfg.input
        .as_deref()
        .ok_or_else(|| CliError::key("input", format!("task {:?} needs an 'input' file", cfg.task)))
}

fn check_input_size(cfg: &ExperimentConfig, d: usize) -> Result<()> {
    match cfg.input_size {
        Some(s) if s != d => Err(CliError::key(
            "input size",
            format!("'input size' is {s} but the model dimension is {d}"),
        )),
        _ => Ok(()),
    }
}

fn flow_config(cfg: &ExperimentConfig, dim: usize, direction: Direction) -> FlowConfig {
    let mut fc = FlowConfig::new(dim, cfg.block_no, cfg.hidden(), direction);
    fc.activation = cfg.activation;
    fc.batch_norm = cfg.batch_norm;
    fc.seed = cfg.seed;
    fc
}

#[derive(Serialize)]
struct Standardization<'a> {
    columns: &'a [String],
    means: &'a [f64],
    sds: &'a [f64],
}

fn record_training(m: &mut Manifest, dir: &Path, name: &str, report: &TrainReport) -> Result<()> {
    let p = dir.join(format!("{name}_loss.csv"));
    write_trace(&p, &report.loss_trace)?;
    m.artifact(&p);
    if report.ledger.private {
        m.privacy.push(report.ledger.clone());
    }
    m.metric(&format!("{name}_final_loss"), report.loss_trace.last());
    m.metric(&format!("{name}_skipped_iterations"), report.skipped_iterations);
    Ok(())
}

/// Trains a density flow on the standardized table.
pub fn train_density(cfg: &ExperimentConfig, table: &Table) -> Result<(FlowModel, TrainReport, TrainConfig)> {
    let fc = flow_config(cfg, table.data.cols(), Direction::Density);
    let mut model = FlowModel::new(fc)?;
    let tc = cfg.train_config(table.data.rows())?;
    let report = fit_density(&mut model, &table.data, &tc)?;
    Ok((model, report, tc))
}

/// Draws `n` rows from a density flow, maps them back to data units and
/// clamps them into `schema`.
pub fn synthesize(
    model: &FlowModel,
    table: &Table,
    schema: &AttributeSchema,
    n: usize,
    seed: u64,
) -> Result<(Tensor, Vec<usize>)> {
    let z = model.sample(n, seed)?;
    Ok(truncate_to_bounds(&table.destandardize(&z), schema)?)
}

fn density_task(cfg: &ExperimentConfig, dir: &Path, m: &mut Manifest) -> Result<bool> {
    let input = require_input(cfg)?;
    let schema = schema_for(cfg.schema, input)?;
    let table = load_table(input, &schema).map_err(|e| map_read(input, e))?;
    check_input_size(cfg, table.data.cols())?;
    let (model, report, tc) = train_density(cfg, &table)?;
    m.metric("rows", table.data.rows());
    m.metric("sample_rate", tc.sample_rate);
    record_training(m, dir, "density", &report)?;

    let ck = dir.join("model.json");
    model.save(&ck).map_err(|e| CliError::io(&ck, e))?;
    m.artifact(&ck);
    let sp = dir.join("standardization.json");
    write_json(
        &sp,
        &Standardization {
            columns: &table.columns,
            means: &table.means,
            sds: &table.sds,
        },
    )?;
    m.artifact(&sp);

    if cfg.task == Task::Synth {
        let n = cfg.samples.unwrap_or(table.data.rows());
        let mut sets = Vec::new();
        for k in 0..cfg.num_datasets {
            let (data, counts) = synthesize(&model, &table, &schema, n, synth_seed(cfg.seed, k))?;
            let p = dir.join(format!("synthetic_{k}.csv"));
            write_csv(&p, &table.columns, &data)?;
            m.artifact(&p);
            log::info!(
                "synthetic set {k}: {n} rows, {} values truncated; sampled from the same trained model, \
                 privacy mu {:?}",
                counts.iter().sum::<usize>(),
                report.ledger.mu
            );
            sets.push(json!({"index": k, "rows": n, "truncated": counts}));
        }
        m.metric("synthetic_sets", sets);
    }
    Ok(report.converged)
}

pub fn synth_seed(seed: u64, k: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(1000 + k as u64)
}

/// Fits a sampling flow to `target` and returns the trained model.
pub fn train_vi(
    cfg: &ExperimentConfig,
    target: &dyn TargetPosterior,
    rows: &Tensor,
) -> Result<(FlowModel, TrainReport, TrainConfig)> {
    check_input_size(cfg, target.dim())?;
    let fc = flow_config(cfg, target.dim(), Direction::Sampling);
    let mut model = FlowModel::new(fc)?;
    let tc = cfg.train_config(rows.rows())?;
    let report = fit_vi(&mut model, target, rows, &tc)?;
    Ok((model, report, tc))
}

pub fn posterior_summary(model: &FlowModel, n: usize, seed: u64) -> Result<(Tensor, SampleSummary)> {
    let s = model.sample(n, seed)?;
    let sum = summarize(&s);
    Ok((s, sum))
}

fn vi_task(cfg: &ExperimentConfig, dir: &Path, m: &mut Manifest) -> Result<bool> {
    let input = require_input(cfg)?;
    let n_draws = cfg.samples.unwrap_or(10_000);
    let draw_seed = cfg.seed.wrapping_add(1000);
    let (samples, names, report) = match cfg.model {
        ViModel::Regression => {
            let spec = RegressionSpec::default();
            let rows = read_raw(input, &AttributeSchema::regression(&spec)).map_err(|e| map_read(input, e))?;
            let target = RegressionTarget::new(spec.sigma0, spec.sigma);
            let (model, report, _) = train_vi(cfg, &target, &rows)?;
            let names: Vec<String> = (0..5).map(|j| format!("beta{j}")).collect();
            (model.sample(n_draws, draw_seed)?, names, report)
        }
        ViModel::Cvsim => {
            let sp = cfg
                .surrogate
                .as_deref()
                .ok_or_else(|| CliError::key("surrogate", "model = cvsim needs a 'surrogate' file"))?;
            let sur = load_surrogate(sp)?;
            let rows = read_raw(input, &AttributeSchema::unbounded(&OUTPUT_NAMES)).map_err(|e| map_read(input, e))?;
            let d = CVSimParams::default();
            let target = SurrogateTarget::new(&sur, sur.bounds, (d.r_ro, d.c_a));
            let (model, report, _) = train_vi(cfg, &target, &rows)?;
            let z = model.sample(n_draws, draw_seed)?;
            (target.to_physical(&z), vec!["r_ro".into(), "c_a".into()], report)
        }
    };
    record_training(m, dir, "vi", &report)?;
    let p = dir.join("posterior.csv");
    write_csv(&p, &names, &samples)?;
    m.artifact(&p);
    let s = summarize(&samples);
    let sp = dir.join("posterior_summary.json");
    write_json(&sp, &json!({"names": names, "summary": s}))?;
    m.artifact(&sp);
    m.metric("posterior", json!({"names": names, "mean": s.mean, "sd": s.sd}));
    Ok(report.converged)
}

pub fn load_surrogate(path: &Path) -> Result<Surrogate> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: not a surrogate file: {e}", path.display())))
}

pub fn cvsim_run(params: CVSimParams, cycles: usize, dt: f64, dir: &Path, m: &mut Manifest) -> Result<()> {
    let sim = simulate(&params, cycles, dt)?;
    let hp = dir.join("history.csv");
    write_csv(&hp, &History::header(), &sim.history.to_tensor())?;
    m.artifact(&hp);
    let op = dir.join("outputs.json");
    let outputs: serde_json::Map<String, serde_json::Value> = OUTPUT_NAMES
        .iter()
        .zip(sim.outputs.to_array())
        .map(|(k, v)| (k.to_string(), json!(v)))
        .collect();
    write_json(&op, &outputs)?;
    m.artifact(&op);
    m.metric("outputs", outputs);
    m.metric("equilibrium_residual", sim.equilibrium.residual);
    m.metric("periodic_error", sim.periodic_error);
    m.metric("max_volume_drift", sim.volume_drift.iter().cloned().fold(0.0, f64::max));
    m.metric("steps_per_cycle", sim.steps_per_cycle);
    Ok(())
}

/// Simulates Sobol points `start..start + n` over the default bounds.
pub fn cvsim_sweep(start: u32, n: usize, cycles: usize, dt: f64, dir: &Path, m: &mut Manifest) -> Result<()> {
    let sim = Simulator {
        cycles,
        dt,
        ..Simulator::default()
    };
    let bounds = ParamBounds::default_for(&sim.base);
    let (x, y, failed) = sobol_design(&sim, &bounds, start, n)?;
    let mut header = vec!["r_ro".to_string(), "c_a".to_string()];
    header.extend(OUTPUT_NAMES.iter().map(|s| s.to_string()));
    let data: Vec<f64> = x.iter().zip(&y).flat_map(|(a, b)| a.iter().chain(b).copied().collect::<Vec<_>>()).collect();
    let p = dir.join("sweep.csv");
    if x.is_empty() {
        write_records(&p, &header.iter().map(|s| s.as_str()).collect::<Vec<_>>(), &[])?;
    } else {
        let t = Tensor::new(vec![x.len(), 10], data).map_err(|e| CliError::Runtime(e.to_string()))?;
        write_csv(&p, &header, &t)?;
    }
    m.artifact(&p);
    m.metric("points", x.len());
    m.metric("failed_indices", failed);
    m.metric("bounds", bounds);
    Ok(())
}

fn surrogate_task(cfg: &ExperimentConfig, dir: &Path, m: &mut Manifest) -> Result<()> {
    let sim = Simulator {
        cycles: cfg.cycles,
        dt: cfg.dt,
        ..Simulator::default()
    };
    let bounds = ParamBounds::default_for(&sim.base);
    let sc = SurrogateConfig {
        n_samples: cfg.samples.unwrap_or(SurrogateConfig::default().n_samples),
        hidden: cfg.hidden(),
        iterations: cfg.iter_no,
        lr: cfg.learn_rate,
        decay: cfg.decay(),
        seed: cfg.seed,
        ..SurrogateConfig::default()
    };
    let (sur, report) = train_surrogate(&sim, &bounds, &sc)?;
    let p = dir.join("surrogate.json");
    write_json(&p, &sur)?;
    m.artifact(&p);
    let lp = dir.join("surrogate_loss.csv");
    write_trace(&lp, &report.loss_trace)?;
    m.artifact(&lp);
    m.metric("held_out_relative_rmse", &report.held_out_relative_rmse);
    m.metric("excluded_sobol_indices", &report.excluded);
    Ok(())
}

pub fn metrics_grid(
    metric: Metric,
    rho0: f64,
    sigma0: f64,
    rho_points: usize,
    sigma_points: usize,
    dir: &Path,
    m: &mut Manifest,
) -> Result<()> {
    let rhos = linspace(-0.99, 0.99, rho_points);
    let sigmas = linspace(0.5 * sigma0, 4.0 * sigma0, sigma_points);
    let grid = contour_grid(metric, rho0, sigma0, &rhos, &sigmas)?;
    let sp = dir.join(format!("{metric}_surface.csv"));
    let f = std::fs::File::create(&sp).map_err(|e| CliError::io(&sp, e))?;
    grid.write_surface_csv(std::io::BufWriter::new(f))?;
    m.artifact(&sp);
    let tp = dir.join(format!("{metric}_trace.csv"));
    let f = std::fs::File::create(&tp).map_err(|e| CliError::io(&tp, e))?;
    grid.write_trace_csv(std::io::BufWriter::new(f))?;
    m.artifact(&tp);
    Ok(())
}

pub fn simulate_task(seed: u64, dir: &Path, m: &mut Manifest) -> Result<()> {
    let spec = RegressionSpec {
        seed,
        ..RegressionSpec::default()
    };
    let data = simulate_regression(&spec)?;
    let schema = AttributeSchema::regression(&spec);
    let p = dir.join("regression.csv");
    write_csv(&p, &schema.names(), &data.rows())?;
    m.artifact(&p);
    m.metric("spec", &spec);
    m.metric("rows", spec.n);
    Ok(())
}

#[derive(Debug, Clone, Copy, Default)]
pub struct AccountantQuery {
    pub mu: Option<f64>,
    pub sigma: Option<f64>,
    pub eps: Option<f64>,
    pub delta: Option<f64>,
    pub rate: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct AccountantReport {
    pub mu: f64,
    pub sigma: f64,
    pub epsilon: Option<f64>,
    pub delta: Option<f64>,
    pub rate: f64,
    pub iterations: usize,
}

/// Completes `(μ, σ, ε, δ)` from a partial specification, given `(r, T)`.
/// `μ` comes from exactly one of: `mu`, `sigma`, or the pair `(eps, delta)`.
pub fn accountant(q: &AccountantQuery) -> Result<AccountantReport> {
    if !(q.rate > 0.0 && q.rate <= 1.0) {
        return Err(CliError::key("rate", format!("rate must lie in (0, 1], got {}", q.rate)));
    }
    if q.iterations == 0 {
        return Err(CliError::key("iters", "iterations must be at least 1"));
    }
    let both = q.eps.is_some() && q.delta.is_some();
    let sources = q.mu.is_some() as usize + q.sigma.is_some() as usize + both as usize;
    if sources > 1 {
        return Err(CliError::config(
            "over-determined: give one of --mu, --sigma, or the pair --eps/--delta, plus optionally one of --eps/--delta",
        ));
    }
    let mu = match (q.mu, q.sigma) {
        (Some(mu), _) => mu,
        (None, Some(s)) => mu_total(s, q.rate, q.iterations),
        (None, None) if both => mu_from_eps_delta(q.eps.unwrap(), q.delta.unwrap())?,
        _ => return Err(CliError::config("need --mu, --sigma, or both --eps and --delta")),
    };
    let sigma = match q.sigma {
        Some(s) => s,
        None => sigma_from_mu(mu, q.rate, q.iterations)?,
    };
    let (epsilon, delta) = match (q.eps, q.delta) {
        (Some(e), Some(d)) => (Some(e), Some(d)),
        (Some(e), None) => (Some(e), Some(delta_from_eps_mu(e, mu))),
        (None, Some(d)) => (Some(eps_from_delta_mu(d, mu)?), Some(d)),
        (None, None) => (None, None),
    };
    Ok(AccountantReport {
        mu,
        sigma,
        epsilon,
        delta,
        rate: q.rate,
        iterations: q.iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(rate: f64) -> AccountantQuery {
        AccountantQuery {
            rate,
            iterations: 8000,
            ..Default::default()
        }
    }

    #[test]
    fn mu_to_sigma() {
        let r = accountant(&AccountantQuery { mu: Some(6.10), ..q(0.5) }).unwrap();
        assert!((r.sigma - 7.36).abs() < 0.02);
        assert!(r.epsilon.is_none());
    }

    #[test]
    fn sigma_and_eps_give_delta() {
        let r = accountant(&AccountantQuery {
            sigma: Some(7.36),
            eps: Some(32.0),
            ..q(0.5)
        })
        .unwrap();
        assert!((r.mu - 6.10).abs() < 0.02);
        assert!((r.delta.unwrap() - 0.01).abs() < 0.002);
    }

    #[test]
    fn eps_delta_pair_gives_mu() {
        let r = accountant(&AccountantQuery {
            eps: Some(32.0),
            delta: Some(delta_from_eps_mu(32.0, 6.10)),
            ..q(0.5)
        })
        .unwrap();
        assert!((r.mu - 6.10).abs() < 1e-6);
    }

    #[test]
    fn overdetermined_and_underdetermined_are_config_errors() {
        let over = accountant(&AccountantQuery {
            mu: Some(1.0),
            sigma: Some(2.0),
            ..q(0.5)
        });
        assert_eq!(over.unwrap_err().exit_code(), crate::error::EXIT_CONFIG);
        let under = accountant(&AccountantQuery { eps: Some(1.0), ..q(0.5) });
        assert_eq!(under.unwrap_err().exit_code(), crate::error::EXIT_CONFIG);
        let rate = accountant(&AccountantQuery { mu: Some(1.0), ..q(0.0) });
        assert!(rate.is_err());
    }
}
