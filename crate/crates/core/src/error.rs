use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("grid {grid} too small: {reason}")]
    GridTooSmall { grid: String, reason: String },

    #[error("could not place a tumour satisfying the minimum region sizes after {attempts} attempts")]
    TumourPlacement { attempts: usize },

    #[error("unknown modality {0:?}")]
    UnknownModality(String),

    #[error("unknown label value {0}")]
    UnknownLabel(u8),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty availability mask")]
    EmptyAvailability,

    #[error("HSIC needs at least two paired rows, got {0}")]
    TooFewSamples(usize),

    #[error("non-finite loss term `{term}` ({value})")]
    NonFiniteLoss { term: &'static str, value: f64 },

    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("output directory {0} is not empty (pass --overwrite to replace it)")]
    OutputNotEmpty(PathBuf),

    #[error("missing path {0}")]
    MissingPath(PathBuf),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{0}")]
    Degenerate(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json { path: path.into(), source }
    }

    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig { field: field.into(), reason: reason.into() }
    }

    /// True for user-facing validation failures (bad flags, configs, paths).
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig { .. }
                | Error::OutputNotEmpty(_)
                | Error::MissingPath(_)
                | Error::UnknownModality(_)
                | Error::GridTooSmall { .. }
        )
    }
}
