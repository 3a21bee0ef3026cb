use std::path::PathBuf;

use dualpath_tensor::TensorError;
use thiserror::Error;

use crate::audio::AudioError;
use crate::dft::FormatError;
use crate::manifest::ManifestError;
use crate::metrics::MetricError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error(transparent)]
    Audio(#[from] AudioError),

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error(transparent)]
    Manifest(#[from] ManifestError),

    #[error(transparent)]
    Metric(#[from] MetricError),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True when the failure is numerical rather than a problem with inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteLoss { .. } | Error::Tensor(TensorError::NonFinite { .. })
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
