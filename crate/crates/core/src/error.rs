use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FtnError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("ingestion error for '{id}': {reason}")]
    Ingestion { id: String, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("shape conflict importing tensor '{name}': expected {expected:?}, found {found:?}")]
    ShapeConflict {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("non-finite loss in term '{term}' at epoch {epoch}, step {step}")]
    NonFiniteLoss {
        term: String,
        epoch: usize,
        step: usize,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

pub type Result<T> = std::result::Result<T, FtnError>;

pub(crate) fn invalid(msg: impl Into<String>) -> FtnError {
    FtnError::InvalidInput(msg.into())
}

pub(crate) fn config(msg: impl Into<String>) -> FtnError {
    FtnError::Config(msg.into())
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> FtnError {
    let path = path.into();
    move |source| FtnError::Io { path, source }
}
