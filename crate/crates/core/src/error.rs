use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse classification used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Numeric,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unstable grid: Courant number {courant:.6} exceeds 1")]
    Unstable { courant: f64 },

    #[error("non-finite pressure encountered at time step {step}")]
    NonFiniteField { step: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite activation in layer {layer} at recursion step {step}")]
    NonFiniteActivation { layer: usize, step: usize },

    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),

    #[error("training diverged at epoch {epoch} (loss = {loss})")]
    Diverged { epoch: usize, loss: f64 },

    #[error("field too short: need at least {required} time steps, have {available}")]
    TooShort { required: usize, available: usize },

    #[error("train/test leakage: {0}")]
    Leakage(String),

    #[error("missing artifact: {0}")]
    Missing(String),

    #[error("run directory {0} already holds a run with this configuration (use --force to overwrite)")]
    RunExists(PathBuf),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_)
            | Error::Unstable { .. }
            | Error::Shape(_)
            | Error::TooShort { .. }
            | Error::Leakage(_)
            | Error::RunExists(_) => ErrorKind::Config,
            Error::NonFiniteField { .. }
            | Error::NonFiniteActivation { .. }
            | Error::NonFiniteGradient(_)
            | Error::Diverged { .. } => ErrorKind::Numeric,
            Error::Missing(_) | Error::Format { .. } | Error::Io { .. } => ErrorKind::Io,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
