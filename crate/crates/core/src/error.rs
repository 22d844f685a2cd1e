use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: format error at byte {offset}: {message}")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("invalid patch grid: {0}")]
    InvalidGrid(String),

    #[error("grid mismatch in sample {sample}: {detail}")]
    GridMismatch { sample: String, detail: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("validation failed for sample {sample}: {detail}")]
    Validation { sample: String, detail: String },

    #[error("unknown sample id {0:?}")]
    UnknownSample(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("non-finite value at index {index} of {what}")]
    NonFinite { what: String, index: usize },

    #[error("background seed {seed} has a zero-norm feature vector")]
    DegenerateSeed { seed: usize },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("conjugate gradient did not converge after {iterations} iterations (relative residual {residual:.3e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("pairing error: {0}")]
    Pairing(String),

    #[error("{0}")]
    Json(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub fn format(path: impl Into<PathBuf>, offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            offset,
            message: message.into(),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Config,
            Error::NonFinite { .. }
            | Error::DegenerateSeed { .. }
            | Error::Singular(_)
            | Error::NotConverged { .. } => ErrorKind::Numerical,
            _ => ErrorKind::Data,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e.to_string())
    }
}
