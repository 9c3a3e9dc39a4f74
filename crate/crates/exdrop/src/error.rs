use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("invalid `{field}`: {reason}")]
    Validation { field: String, reason: String },
    #[error("cannot ingest {path}: {reason}")]
    Ingestion { path: PathBuf, reason: String },
    #[error("training diverged at epoch {epoch}, step {step}: {component} = {magnitude:e}")]
    Divergence {
        epoch: usize,
        step: usize,
        component: &'static str,
        magnitude: f64,
    },
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Core(#[from] exdrop_core::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> HarnessError {
    let path = path.into();
    move |source| HarnessError::Io { path, source }
}

pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> HarnessError {
    HarnessError::Validation {
        field: field.into(),
        reason: reason.into(),
    }
}
