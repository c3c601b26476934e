use std::path::PathBuf;

use thiserror::Error;

use crate::dataset_io::ManifestError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors surfaced by the library. The CLI maps [`Error::category`] onto
/// its exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input data: {0}")]
    Data(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error(transparent)]
    Manifest(#[from] ManifestError),

    #[error("pose sampling failed after {rounds} rounds: {reason}")]
    PoseSampling { rounds: usize, reason: String },

    #[error("non-finite gradient in parameter block `{block}`")]
    NonFiniteGradient { block: String },

    #[error("training diverged at iteration {iteration}: loss = {loss}")]
    Diverged { iteration: usize, loss: f64 },
}

/// Coarse error classes, one per CLI exit code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Numerical,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) | Error::PoseSampling { .. } => ErrorCategory::Config,
            Error::Data(_) | Error::Io { .. } | Error::Image { .. } | Error::Manifest(_) => {
                ErrorCategory::Data
            }
            Error::NonFiniteGradient { .. } | Error::Diverged { .. } => ErrorCategory::Numerical,
        }
    }
}
