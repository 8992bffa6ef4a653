//! Flat `key = value` experiment configs. Keys are matched case-insensitively
//! with runs of whitespace collapsed, so `block No.` and `block no.` agree.
//! A value of `-` leaves the key at its default.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use dpflow::divergences::Metric;
use dpflow::flows::Activation;
use dpflow::train::{DpSettings, OptimizerKind, TrainConfig};
use serde::Serialize;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Density,
    Synth,
    Vi,
    Cvsim,
    Surrogate,
    Metrics,
    Simulate,
    Accountant,
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "density" => Task::Density,
            "synth" => Task::Synth,
            "vi" => Task::Vi,
            "cvsim" => Task::Cvsim,
            "surrogate" => Task::Surrogate,
            "metrics" => Task::Metrics,
            "simulate" => Task::Simulate,
            "accountant" => Task::Accountant,
            _ => {
                return Err(format!(
                    "unknown task '{s}' (expected density, synth, vi, cvsim, surrogate, metrics, simulate or accountant)"
                ))
            }
        })
    }
}

/// Posterior targeted by a `vi` run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViModel {
    Regression,
    Cvsim,
}

/// Bounds applied to synthetic rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemaKind {
    None,
    Ehr,
    Regression,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub task: Task,
    pub block_no: usize,
    pub hidden_no: usize,
    pub hidden_size: usize,
    pub input_size: Option<usize>,
    pub iter_no: usize,
    pub batch_size: Option<usize>,
    pub optimizer: OptimizerKind,
    pub learn_rate: f64,
    pub scheduler_exp: bool,
    pub decay_factor: Option<f64>,
    pub clipping: Option<f64>,
    pub poisson_rate: Option<f64>,
    pub mu: Option<f64>,
    pub sigma: Option<f64>,
    pub seed: u64,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub activation: Activation,
    pub batch_norm: bool,
    pub model: ViModel,
    pub surrogate: Option<PathBuf>,
    pub samples: Option<usize>,
    pub num_datasets: usize,
    pub schema: SchemaKind,
    pub metric: Metric,
    pub rho0: f64,
    pub sigma0: f64,
    pub cycles: usize,
    pub dt: f64,
}

impl ExperimentConfig {
    pub fn new(task: Task) -> Self {
        Self {
            task,
            block_no: 5,
            hidden_no: 1,
            hidden_size: 100,
            input_size: None,
            iter_no: 8000,
            batch_size: None,
            optimizer: OptimizerKind::Rmsprop,
            learn_rate: 0.01,
            scheduler_exp: false,
            decay_factor: None,
            clipping: None,
            poisson_rate: None,
            mu: None,
            sigma: None,
            seed: 0,
            input: None,
            output: None,
            activation: Activation::Relu,
            batch_norm: true,
            model: ViModel::Regression,
            surrogate: None,
            samples: None,
            num_datasets: 1,
            schema: SchemaKind::None,
            metric: Metric::Kl,
            rho0: 0.5,
            sigma0: 1.0,
            cycles: 10,
            dt: 1e-3,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        // Relative paths in a config are relative to the config file.
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.input, &mut cfg.output, &mut cfg.surrogate].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs: Vec<(String, String, usize)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(CliError::config(format!(
                    "line {}: expected 'key = value', got '{line}'",
                    lineno + 1
                )));
            };
            let key = normalize_key(k);
            if pairs.iter().any(|(p, _, _)| *p == key) {
                return Err(CliError::key(&key, format!("line {}: duplicate key '{key}'", lineno + 1)));
            }
            pairs.push((key, v.trim().to_string(), lineno + 1));
        }
        let task = match pairs.iter().find(|(k, _, _)| k == "task") {
            Some((_, v, _)) => v.parse::<Task>().map_err(|m| CliError::key("task", m))?,
            None => return Err(CliError::key("task", "missing required key 'task'")),
        };
        let mut cfg = Self::new(task);
        for (key, value, line) in &pairs {
            if key == "task" || value == "-" {
                continue;
            }
            cfg.set(key, value)
                .map_err(|m| CliError::key(key, format!("line {line}: key '{key}': {m}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        match key {
            "block no." => self.block_no = parse(v)?,
            "hidden no." => self.hidden_no = parse(v)?,
            "hidden size" => self.hidden_size = parse(v)?,
            "input size" => self.input_size = Some(parse(v)?),
            "iter no." => self.iter_no = parse(v)?,
            "batch size" => self.batch_size = Some(parse(v)?),
            "optimizer" => self.optimizer = v.parse()?,
            "learn rate" => self.learn_rate = parse(v)?,
            "scheduler" => {
                self.scheduler_exp = match v.to_ascii_lowercase().as_str() {
                    "exp" | "exponential" => true,
                    "none" => false,
                    _ => return Err(format!("unknown scheduler '{v}' (expected Exp or -)")),
                }
            }
            "decay factor" => self.decay_factor = Some(parse(v)?),
            "clipping" => self.clipping = Some(parse(v)?),
            "poisson rate" => self.poisson_rate = Some(parse_rate(v)?),
            "mu" => self.mu = Some(parse(v)?),
            "sigma" => self.sigma = Some(parse(v)?),
            "seed" => self.seed = parse(v)?,
            "input" => self.input = Some(PathBuf::from(v)),
            "output" => self.output = Some(PathBuf::from(v)),
            "activation" => {
                self.activation = match v.to_ascii_lowercase().as_str() {
                    "relu" => Activation::Relu,
                    "tanh" => Activation::Tanh,
                    _ => return Err(format!("unknown activation '{v}' (expected ReLU or tanh)")),
                }
            }
            "batch norm" => self.batch_norm = parse_bool(v)?,
            "model" => {
                self.model = match v.to_ascii_lowercase().as_str() {
                    "regression" => ViModel::Regression,
                    "cvsim" => ViModel::Cvsim,
                    _ => return Err(format!("unknown model '{v}' (expected regression or cvsim)")),
                }
            }
            "surrogate" => self.surrogate = Some(PathBuf::from(v)),
            "samples" => self.samples = Some(parse(v)?),
            "num datasets" => self.num_datasets = parse(v)?,
            "schema" => {
                self.schema = match v.to_ascii_lowercase().as_str() {
                    "none" => SchemaKind::None,
                    "ehr" => SchemaKind::Ehr,
                    "regression" => SchemaKind::Regression,
                    _ => return Err(format!("unknown schema '{v}' (expected none, ehr or regression)")),
                }
            }
            "metric" => self.metric = v.parse().map_err(|e| format!("{e}"))?,
            "rho0" => self.rho0 = parse(v)?,
            "sigma0" => self.sigma0 = parse(v)?,
            "cycles" => self.cycles = parse(v)?,
            "dt" => self.dt = parse(v)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |key: &str, x: f64| {
            if x > 0.0 && x.is_finite() {
                Ok(())
            } else {
                Err(CliError::key(key, format!("'{key}' must be positive and finite, got {x}")))
            }
        };
        if self.block_no == 0 {
            return Err(CliError::key("block no.", "'block no.' must be at least 1"));
        }
        if self.hidden_no == 0 || self.hidden_size == 0 {
            return Err(CliError::key("hidden size", "hidden layers must be non-empty"));
        }
        if self.iter_no == 0 {
            return Err(CliError::key("iter no.", "'iter no.' must be at least 1"));
        }
        if self.num_datasets == 0 {
            return Err(CliError::key("num datasets", "'num datasets' must be at least 1"));
        }
        pos("learn rate", self.learn_rate)?;
        if let Some(d) = self.decay_factor {
            if !(d > 0.0 && d <= 1.0) {
                return Err(CliError::key("decay factor", format!("'decay factor' must lie in (0, 1], got {d}")));
            }
            if !self.scheduler_exp {
                return Err(CliError::key("decay factor", "'decay factor' needs 'scheduler = Exp'"));
            }
        }
        if let Some(c) = self.clipping {
            pos("clipping", c)?;
        }
        if let Some(r) = self.poisson_rate {
            if !(r > 0.0 && r <= 1.0) {
                return Err(CliError::key("poisson rate", format!("'poisson rate' must lie in (0, 1], got {r}")));
            }
        }
        if self.mu.is_some() && self.sigma.is_some() {
            return Err(CliError::key("sigma", "give either 'mu' or 'sigma', not both"));
        }
        if let Some(m) = self.mu {
            pos("mu", m)?;
        }
        if let Some(s) = self.sigma {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(CliError::key("sigma", format!("'sigma' must be finite and non-negative, got {s}")));
            }
        }
        let trains = matches!(self.task, Task::Density | Task::Synth | Task::Vi);
        if trains && (self.mu.is_some() || self.sigma.is_some()) && self.clipping.is_none() {
            return Err(CliError::key("clipping", "private training needs a 'clipping' bound"));
        }
        if trains && self.clipping.is_some() && self.mu.is_none() && self.sigma.is_none() {
            return Err(CliError::key("mu", "'clipping' is set but neither 'mu' nor 'sigma' is"));
        }
        pos("sigma0", self.sigma0)?;
        pos("dt", self.dt)?;
        if self.cycles < 2 {
            return Err(CliError::key("cycles", "'cycles' must be at least 2"));
        }
        Ok(())
    }

    pub fn hidden(&self) -> Vec<usize> {
        vec![self.hidden_size; self.hidden_no]
    }

    pub fn decay(&self) -> f64 {
        if self.scheduler_exp {
            self.decay_factor.unwrap_or(1.0)
        } else {
            1.0
        }
    }

    /// Subsampling rate for `n` records. An explicit Poisson rate wins. For
    /// density estimation a batch size `B` means `r = B/n`. For VI the batch
    /// size is the number of Monte Carlo draws, so the rate defaults to 1.
    pub fn sample_rate(&self, n: usize) -> f64 {
        match (self.poisson_rate, self.batch_size, self.task) {
            (Some(r), _, _) => r,
            (None, Some(b), Task::Density | Task::Synth) => (b as f64 / n as f64).min(1.0),
            _ => 1.0,
        }
    }

    /// Training settings for a data set of `n` records, with the noise
    /// multiplier derived from `mu` when that is the privacy target.
    pub fn train_config(&self, n: usize) -> Result<TrainConfig> {
        let mut tc = TrainConfig::new(self.optimizer, self.learn_rate, self.iter_no);
        tc.decay = self.decay();
        tc.seed = self.seed;
        tc.sample_rate = self.sample_rate(n);
        if self.task == Task::Vi {
            if let Some(b) = self.batch_size {
                tc.mc_samples = b;
            }
        }
        if let Some(clip) = self.clipping {
            let sigma = match (self.mu, self.sigma) {
                (Some(mu), _) => dpflow::privacy::sigma_from_mu(mu, tc.sample_rate, self.iter_no)?,
                (None, Some(s)) => s,
                (None, None) => unreachable!("validated"),
            };
            tc.privacy = Some(DpSettings { sigma, clip });
        }
        tc.validate()?;
        Ok(tc)
    }
}

fn normalize_key(k: &str) -> String {
    k.split_whitespace().collect::<Vec<_>>().join(" ").to_ascii_lowercase()
}

fn parse<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse::<T>().map_err(|_| format!("cannot parse '{v}'"))
}

fn parse_rate(v: &str) -> std::result::Result<f64, String> {
    match v.strip_suffix('%') {
        Some(p) => Ok(parse::<f64>(p.trim())? / 100.0),
        None => parse(v),
    }
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(format!("cannot parse '{v}' as a boolean")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const REG_DP_DE: &str = "\
# regression density estimation
task = synth
block No. = 18
hidden No. = 1
hidden size = 100
input size = 9
iter No. = 8000
batch size = 100
optimizer = RMSProp
learn rate = 0.002
scheduler = Exp
decay factor = 0.9995
clipping = 5
poisson rate = 8.33%
mu = 1.12
";

    #[test]
    fn table_rows_parse() {
        let c = ExperimentConfig::parse(REG_DP_DE).unwrap();
        assert_eq!(c.task, Task::Synth);
        assert_eq!(c.block_no, 18);
        assert_eq!(c.hidden(), vec![100]);
        assert_eq!(c.input_size, Some(9));
        assert_eq!(c.optimizer, OptimizerKind::Rmsprop);
        assert!((c.poisson_rate.unwrap() - 0.0833).abs() < 1e-12);
        assert_eq!(c.decay(), 0.9995);
        let tc = c.train_config(6000).unwrap();
        let dp = tc.privacy.unwrap();
        assert_eq!(dp.clip, 5.0);
        let mu = dpflow::privacy::mu_total(dp.sigma, tc.sample_rate, 8000);
        assert!((mu - 1.12).abs() < 1e-9);
    }

    #[test]
    fn dash_means_default() {
        let c = ExperimentConfig::parse("task = density\nscheduler = -\ndecay factor = -\nclipping = -\n").unwrap();
        assert_eq!(c.decay(), 1.0);
        assert!(c.train_config(100).unwrap().privacy.is_none());
    }

    #[test]
    fn keys_are_case_and_space_insensitive() {
        let c = ExperimentConfig::parse("TASK = vi\nBlock   no. = 2\n").unwrap();
        assert_eq!(c.block_no, 2);
    }

    #[test]
    fn unknown_key_is_named() {
        match ExperimentConfig::parse("task = vi\nlearning rate = 0.1\n") {
            Err(CliError::Config { key, message }) => {
                assert_eq!(key.as_deref(), Some("learning rate"));
                assert!(message.contains("learning rate"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_values_name_their_key() {
        for (text, key) in [
            ("task = vi\noptimizer = lbfgs\n", "optimizer"),
            ("task = vi\nlearn rate = fast\n", "learn rate"),
            ("task = vi\npoisson rate = 150%\n", "poisson rate"),
            ("task = vi\ndecay factor = 0.9\n", "decay factor"),
            ("task = vi\nclipping = 1\n", "mu"),
            ("task = vi\nmu = 1\n", "clipping"),
            ("task = vi\nmu = 1\nsigma = 2\nclipping = 1\n", "sigma"),
            ("block no. = 3\n", "task"),
            ("task = vi\nseed = 1\nseed = 2\n", "seed"),
        ] {
            match ExperimentConfig::parse(text) {
                Err(CliError::Config { key: Some(k), .. }) => assert_eq!(k, key, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn missing_equals_is_rejected() {
        assert!(matches!(
            ExperimentConfig::parse("task = vi\nblock no. 3\n"),
            Err(CliError::Config { .. })
        ));
    }

    #[test]
    fn batch_size_meaning_depends_on_task() {
        let d = ExperimentConfig::parse("task = density\nbatch size = 500\n").unwrap();
        assert_eq!(d.sample_rate(6000), 500.0 / 6000.0);
        let v = ExperimentConfig::parse("task = vi\nbatch size = 500\n").unwrap();
        assert_eq!(v.sample_rate(6000), 1.0);
        assert_eq!(v.train_config(6000).unwrap().mc_samples, 500);
    }
}
