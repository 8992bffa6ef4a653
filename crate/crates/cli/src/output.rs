use std::path::{Path, PathBuf};

use dpflow::ndiff::Tensor;
use dpflow::train::PrivacyLedger;
use serde::Serialize;
use serde_json::Value;

use crate::error::{CliError, Result};

/// Environment variable naming the directory that receives run outputs.
pub const OUTPUT_ROOT_ENV: &str = "DPFLOW_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "dpflow-output";

pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT))
}

/// `explicit` if given, otherwise `<root>/<name>`. The directory is created.
pub fn resolve_dir(explicit: Option<&Path>, name: &str) -> Result<PathBuf> {
    let dir = match explicit {
        Some(p) => p.to_path_buf(),
        None => output_root().join(name),
    };
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    Ok(dir)
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub config: Value,
    pub seed: Option<u64>,
    /// One entry per private training run; empty when nothing private ran.
    pub privacy: Vec<PrivacyLedger>,
    pub metrics: Value,
    pub artifacts: Vec<String>,
    pub created: String,
}

impl Manifest {
    pub fn new(command: impl Into<String>, config: Value, seed: Option<u64>) -> Self {
        Self {
            tool: "dpflow",
            version: env!("CARGO_PKG_VERSION"),
            command: command.into(),
            config,
            seed,
            privacy: Vec::new(),
            metrics: Value::Object(Default::default()),
            artifacts: Vec::new(),
            created: chrono::Utc::now().to_rfc3339(),
        }
    }

    pub fn metric(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).unwrap_or(Value::Null);
        if let Value::Object(m) = &mut self.metrics {
            m.insert(key.to_string(), v);
        }
    }

    pub fn artifact(&mut self, path: &Path) {
        self.artifacts.push(path.display().to_string());
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("manifest.json");
        write_json(&path, self)?;
        Ok(path)
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

pub fn write_csv<S: AsRef<str>>(path: &Path, header: &[S], data: &Tensor) -> Result<()> {
    dpflow::datasim::write_table(path, header, data).map_err(|e| CliError::io(path, e))
}

/// Writes a one-column-per-field CSV of the loss trace.
pub fn write_trace(path: &Path, trace: &[f64]) -> Result<()> {
    let data = Tensor::new(
        vec![trace.len(), 2],
        trace.iter().enumerate().flat_map(|(i, &l)| [i as f64, l]).collect(),
    )
    .map_err(|e| CliError::Runtime(e.to_string()))?;
    write_csv(path, &["step", "loss"], &data)
}

/// Writes string records as RFC 4180 CSV.
pub fn write_records(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::io(path, e))?;
    w.write_record(header).map_err(|e| CliError::io(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}
