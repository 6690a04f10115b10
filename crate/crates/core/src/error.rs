use std::path::PathBuf;

use thiserror::Error;

/// Every failure the library can report. Variants mirror the failure classes
/// callers are expected to branch on (a shape bug is not a corrupt file).
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("state error: {0}")]
    State(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("format error in {path}: {msg}", path = .path.display())]
    Format { path: PathBuf, msg: String },
    #[error("version error in {path}: expected {expected}, found {found}", path = .path.display())]
    Version {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },
    #[error("metric error: {0}")]
    Metric(String),
    #[error("io error on {path}: {source}", path = .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag for the variant, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Contract(_) => "contract",
            Error::Numeric(_) => "numeric",
            Error::Parameter(_) => "parameter",
            Error::State(_) => "state",
            Error::Data(_) => "data",
            Error::Validation(_) => "validation",
            Error::Format { .. } => "format",
            Error::Version { .. } => "version",
            Error::Config(_) => "config",
            Error::Divergence { .. } => "divergence",
            Error::Metric(_) => "metric",
            Error::Io { .. } => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
