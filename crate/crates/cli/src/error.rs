use std::path::{Path, PathBuf};

use dpflow::cvsim::CvsimError;
use dpflow::datasim::DatasimError;
use dpflow::divergences::DivergenceError;
use dpflow::flows::FlowError;
use dpflow::privacy::PrivacyError;
use dpflow::train::TrainError;
use serde_json::json;

/// Process exit codes; success is 0.
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NON_CONVERGENCE: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{message}")]
    Config { key: Option<String>, message: String },
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{0}")]
    NonConvergence(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Runtime(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError::Config {
            key: None,
            message: message.into(),
        }
    }

    pub fn key(key: &str, message: impl Into<String>) -> Self {
        CliError::Config {
            key: Some(key.to_string()),
            message: message.into(),
        }
    }

    pub fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            message: err.to_string(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => EXIT_CONFIG,
            CliError::Io { .. } => EXIT_IO,
            CliError::NonConvergence(_) => EXIT_NON_CONVERGENCE,
            CliError::Data(_) | CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }

    pub fn category(&self) -> &'static str {
        match self {
            CliError::Config { .. } => "config",
            CliError::Io { .. } => "io",
            CliError::NonConvergence(_) => "non_convergence",
            CliError::Data(_) => "data",
            CliError::Runtime(_) => "runtime",
        }
    }

    /// One-line JSON error record for stderr.
    pub fn to_json(&self) -> String {
        let mut v = json!({
            "error": self.category(),
            "exit_code": self.exit_code(),
            "message": self.to_string(),
        });
        match self {
            CliError::Config { key: Some(k), .. } => v["key"] = json!(k),
            CliError::Io { path, .. } => v["path"] = json!(path),
            _ => {}
        }
        v.to_string()
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } => CliError::NonConvergence(e.to_string()),
            TrainError::InvalidConfig(m) => CliError::config(m),
            TrainError::Flow(f) => f.into(),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<FlowError> for CliError {
    fn from(e: FlowError) -> Self {
        match e {
            FlowError::InvalidConfig(m) => CliError::config(m),
            FlowError::Io(err) => CliError::Io {
                path: PathBuf::new(),
                message: err.to_string(),
            },
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<DatasimError> for CliError {
    fn from(e: DatasimError) -> Self {
        match e {
            DatasimError::Io(err) => CliError::Io {
                path: PathBuf::new(),
                message: err.to_string(),
            },
            DatasimError::Csv(err) if err.is_io_error() => CliError::Io {
                path: PathBuf::new(),
                message: err.to_string(),
            },
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<CvsimError> for CliError {
    fn from(e: CvsimError) -> Self {
        match e {
            CvsimError::InvalidParams(m) => CliError::config(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<DivergenceError> for CliError {
    fn from(e: DivergenceError) -> Self {
        match e {
            DivergenceError::Io(err) => CliError::Io {
                path: PathBuf::new(),
                message: err.to_string(),
            },
            other => CliError::config(other.to_string()),
        }
    }
}

impl From<PrivacyError> for CliError {
    fn from(e: PrivacyError) -> Self {
        match e {
            PrivacyError::InvalidParameter(m) => CliError::config(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}
