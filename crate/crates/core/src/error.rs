use std::path::PathBuf;

use prfusion_tensor::TensorError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("numerical divergence: {0}")]
    Divergence(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn is_divergence(&self) -> bool {
        matches!(self, Error::Divergence(_) | Error::Tensor(TensorError::Divergence { .. }))
    }
}
