use std::path::PathBuf;

use crate::grid::Dims;

/// Errors produced anywhere in the reconstruction engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: Dims, got: Dims },

    #[error("invalid dimensions: {0}")]
    InvalidDims(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("spectrum is not real: discarded imaginary part is {relative:.3e} of the magnitude")]
    NonRealSpectrum { relative: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("I/O error on {path}: {source}")]
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

    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}, example {example}: loss is {loss}")]
    Diverged { epoch: usize, example: usize, loss: f64 },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.into(), reason: reason.into() }
    }
}
