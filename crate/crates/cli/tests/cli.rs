use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_dpflow"));
    c.env("RUST_LOG", "error");
    c
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).env("DPFLOW_OUTPUT_ROOT", dir.join("out")).args(args).output().unwrap()
}

fn stderr_json(o: &Output) -> Value {
    let text = String::from_utf8_lossy(&o.stderr);
    let line = text.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|_| panic!("stderr is not JSON: {text}"))
}

fn manifest(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path.join("manifest.json")).unwrap()).unwrap()
}

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(|x| x.parse().unwrap()).collect())
        .collect();
    (header, rows)
}

fn simulate(dir: &Path, seed: u64) -> PathBuf {
    let out = dir.join(format!("sim{seed}"));
    let o = run_in(dir, &["simulate", "--task", "regression", "--seed", &seed.to_string(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out.join("regression.csv")
}

#[test]
fn accountant_maps_mu_to_sigma() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(dir.path(), &["accountant", "--mu", "6.10", "--rate", "0.5", "--iters", "8000"]);
    assert!(o.status.success());
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!((v["sigma"].as_f64().unwrap() - 7.36).abs() < 0.02);
}

#[test]
fn accountant_eps_to_delta() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(dir.path(), &["accountant", "--mu", "6.10", "--eps", "32", "--rate", "0.5", "--iters", "8000"]);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!((v["delta"].as_f64().unwrap() - 0.01).abs() < 0.002);
}

#[test]
fn usage_errors_exit_two_with_json() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(dir.path(), &["accountant", "--rate", "0.5", "--iters", "10"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"], "config");
    let o = run_in(dir.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run_in(dir.path(), &["reproduce", "table99"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["key"], "experiment");
}

#[test]
fn simulate_writes_regression_data_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let a = simulate(dir.path(), 7);
    let (header, rows) = csv_rows(&a);
    assert_eq!(header, ["w1", "w2", "w3", "w4", "x1", "x2", "x3", "x4", "x5"]);
    assert_eq!(rows.len(), 6000);
    let out = dir.path().join("again");
    run_in(dir.path(), &["simulate", "--seed", "7", "--out", out.to_str().unwrap()]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(out.join("regression.csv")).unwrap());
}

#[test]
fn output_root_comes_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(dir.path(), &["simulate", "--seed", "2"]);
    assert!(o.status.success());
    assert!(dir.path().join("out/simulate-regression-seed2/regression.csv").exists());
    let printed = String::from_utf8_lossy(&o.stdout);
    assert!(printed.trim().ends_with("manifest.json"));
}

#[test]
fn malformed_config_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "task = density\nlearn rate = 0.01\nhidden sise = 10\n").unwrap();
    let o = run_in(dir.path(), &["run", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr_json(&o);
    assert_eq!(e["key"], "hidden sise");
    assert!(e["message"].as_str().unwrap().contains("line 3"));
}

#[test]
fn missing_files_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(dir.path(), &["run", "nowhere.cfg"]);
    assert_eq!(o.status.code(), Some(3));
    let cfg = dir.path().join("c.cfg");
    std::fs::write(&cfg, "task = density\ninput = missing.csv\n").unwrap();
    let o = run_in(dir.path(), &["run", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stderr_json(&o)["error"], "io");
}

#[test]
fn missing_values_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    std::fs::write(&data, "a,b\n1,2\n3,\n5,7\n").unwrap();
    let cfg = dir.path().join("c.cfg");
    std::fs::write(&cfg, "task = density\niter no. = 2\ninput = d.csv\n").unwrap();
    let o = run_in(dir.path(), &["run", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let e = stderr_json(&o);
    assert_eq!(e["error"], "data");
    assert!(e["message"].as_str().unwrap().contains("impute"));
}

#[test]
fn diverging_training_exits_four() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), 1);
    let cfg = dir.path().join("c.cfg");
    std::fs::write(
        &cfg,
        "task = vi\nblock no. = 1\nhidden size = 10\niter no. = 50\nbatch size = 10\noptimizer = SGD\n\
         learn rate = 1e6\ninput = sim1/regression.csv\n",
    )
    .unwrap();
    let o = run_in(dir.path(), &["run", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
    assert_eq!(stderr_json(&o)["error"], "non_convergence");
}

const SYNTH_CFG: &str = "\
task = synth
block No. = 2
hidden No. = 1
hidden size = 16
input size = 9
iter No. = 20
batch size = 100
optimizer = RMSProp
learn rate = 0.002
scheduler = Exp
decay factor = 0.9995
clipping = 5
poisson rate = 1%
mu = 1.12
schema = regression
samples = 500
seed = 4
input = sim1/regression.csv
";

#[test]
fn private_synthesis_writes_bounded_sets_and_ledger() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), 1);
    let cfg = dir.path().join("synth.cfg");
    std::fs::write(&cfg, SYNTH_CFG).unwrap();
    let out = dir.path().join("synth-out");
    let o = run_in(dir.path(), &["run", cfg.to_str().unwrap(), "--num-datasets", "2", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = manifest(&out);
    let mu = m["privacy"][0]["mu"].as_f64().unwrap();
    assert!((mu - 1.12).abs() < 1e-9);
    assert_eq!(m["privacy"][0]["iterations"], 20);
    assert_eq!(m["metrics"]["synthetic_sets"].as_array().unwrap().len(), 2);
    let upper = [1.0, 3.0, 0.5, 2.0];
    for k in 0..2 {
        let (header, rows) = csv_rows(&out.join(format!("synthetic_{k}.csv")));
        assert_eq!(header.len(), 9);
        assert_eq!(rows.len(), 500);
        for r in &rows {
            for j in 0..4 {
                assert!(r[j] >= 0.0 && r[j] <= upper[j]);
            }
        }
    }
    assert_ne!(
        std::fs::read(out.join("synthetic_0.csv")).unwrap(),
        std::fs::read(out.join("synthetic_1.csv")).unwrap()
    );
    assert!(out.join("model.json").exists());
    assert!(out.join("standardization.json").exists());
}

#[test]
fn reruns_give_identical_manifests_apart_from_timestamp() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), 1);
    let cfg = dir.path().join("synth.cfg");
    std::fs::write(&cfg, SYNTH_CFG).unwrap();
    let out = dir.path().join("o");
    let mut seen = Vec::new();
    for _ in 0..2 {
        let o = run_in(dir.path(), &["run", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert!(o.status.success());
        let mut m = manifest(&out);
        m.as_object_mut().unwrap().remove("created");
        seen.push((m, std::fs::read(out.join("synthetic_0.csv")).unwrap()));
    }
    assert_eq!(seen[0], seen[1]);
}

#[test]
fn vi_on_regression_data() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), 1);
    let cfg = dir.path().join("vi.cfg");
    std::fs::write(
        &cfg,
        "task = vi\nblock no. = 1\nhidden size = 10\ninput size = 5\niter no. = 30\nbatch size = 20\n\
         learn rate = 0.01\nclipping = 10\nsigma = 1.0\npoisson rate = 2%\nsamples = 300\ninput = sim1/regression.csv\n",
    )
    .unwrap();
    let out = dir.path().join("vi");
    let o = run_in(dir.path(), &["run", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (header, rows) = csv_rows(&out.join("posterior.csv"));
    assert_eq!(header, ["beta0", "beta1", "beta2", "beta3", "beta4"]);
    assert_eq!(rows.len(), 300);
    let m = manifest(&out);
    assert_eq!(m["privacy"][0]["sigma"], 1.0);
    assert_eq!(m["privacy"][0]["sample_rate"], 0.02);
}

#[test]
fn vi_input_size_must_match_model() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), 1);
    let cfg = dir.path().join("vi.cfg");
    std::fs::write(&cfg, "task = vi\ninput size = 4\niter no. = 2\ninput = sim1/regression.csv\n").unwrap();
    let o = run_in(dir.path(), &["run", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["key"], "input size");
}

#[test]
fn cvsim_run_and_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cv");
    let o = run_in(dir.path(), &["cvsim", "run", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let outputs: Value = serde_json::from_str(&std::fs::read_to_string(out.join("outputs.json")).unwrap()).unwrap();
    assert_eq!(outputs["heart_rate"], 72.0);
    let (header, rows) = csv_rows(&out.join("history.csv"));
    assert_eq!(header.len(), 15);
    assert!(rows.len() > 8000);

    let sw = dir.path().join("sw");
    let o = run_in(dir.path(), &["cvsim", "sweep", "--n", "4", "--cycles", "3", "--out", sw.to_str().unwrap()]);
    assert!(o.status.success());
    let (header, rows) = csv_rows(&sw.join("sweep.csv"));
    assert_eq!(header.len(), 10);
    assert_eq!(rows.len(), 4);
}

#[test]
fn metrics_grid_and_rho_star() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m");
    let o = run_in(
        dir.path(),
        &["metrics", "grid", "--metric", "kl", "--rho0", "0.5", "--rho-points", "21", "--sigma-points", "4", "--out", out.to_str().unwrap()],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let surface = std::fs::read_to_string(out.join("kl_surface.csv")).unwrap();
    assert_eq!(surface.lines().count(), 1 + 21 * 4);
    let trace = std::fs::read_to_string(out.join("kl_trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 4);

    let o = run_in(dir.path(), &["metrics", "rho-star", "--metric", "w2", "--rho0", "0.5", "--sigma-hat", "2", "3"]);
    let text = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    let rho: f64 = lines[1].split(',').nth(4).unwrap().parse().unwrap();
    assert!((rho - 0.5).abs() < 2e-3);
}

#[test]
fn reproduce_accountant_pairs_and_cvsim_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("acc");
    assert!(run_in(dir.path(), &["reproduce", "accountant-pairs", "--out", a.to_str().unwrap()]).status.success());
    assert_eq!(manifest(&a)["metrics"]["all_within_tolerance"], true);
    let text = std::fs::read_to_string(a.join("accountant_pairs.csv")).unwrap();
    assert_eq!(text.lines().count(), 9);

    let c = dir.path().join("cv");
    assert!(run_in(dir.path(), &["reproduce", "cvsim-defaults", "--out", c.to_str().unwrap()]).status.success());
    assert_eq!(manifest(&c)["metrics"]["outputs"]["heart_rate"], 72.0);
}

#[test]
fn reproduce_metrics_fig5() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("f5");
    assert!(run_in(dir.path(), &["reproduce", "metrics-fig5", "--out", out.to_str().unwrap()]).status.success());
    let text = std::fs::read_to_string(out.join("fig5_rho_star.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 4 * 3 * 31);
    // W2 keeps rho0 everywhere.
    for line in text.lines().skip(1).filter(|l| l.starts_with("w2,0.5")) {
        let rho: f64 = line.split(',').nth(4).unwrap().parse().unwrap();
        assert!((rho - 0.5).abs() < 2e-3, "{line}");
    }
}

#[test]
fn reproduce_regression_tables_with_small_budget() {
    let dir = tempfile::tempdir().unwrap();
    for (name, stem) in [("vi-table7", "table7"), ("synthetic-vi-table8", "table8")] {
        let out = dir.path().join(name);
        let o = run_in(
            dir.path(),
            &["reproduce", name, "--seeds", "1", "--iters", "2", "--mc-samples", "4", "--posterior-draws", "200", "--out", out.to_str().unwrap()],
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let mut r = csv::Reader::from_path(out.join(format!("{stem}.csv"))).unwrap();
        let header: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
        assert_eq!(header, ["statistic", "parameter", "non-private", "mu=6.68", "mu=1.12", "mu=0.50", "mu=0.27"]);
        assert_eq!(r.records().count(), 20);
        let m = manifest(&out);
        assert_eq!(m["privacy"].as_array().unwrap().len(), 4);
    }
}
