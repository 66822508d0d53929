use std::path::PathBuf;

use bafnet_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BafnetError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config: {0}")]
    Config(String),
    #[error("shape: {0}")]
    Shape(String),
    #[error("data: {0}")]
    Data(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image {path}: {detail}")]
    Image { path: PathBuf, detail: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite loss at epoch {epoch} step {step} (lr {lr:e}, last grad norm {grad_norm:e})")]
    NonFiniteLoss { epoch: usize, step: usize, lr: f64, grad_norm: f64 },
}

impl BafnetError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        BafnetError::Io { path: path.into(), source }
    }

    /// NaN/Inf anywhere in the numeric core, including forward-pass checks.
    pub fn is_numeric(&self) -> bool {
        matches!(self, BafnetError::NonFiniteLoss { .. } | BafnetError::Tensor(TensorError::NonFinite { .. }))
    }

    pub fn is_io(&self) -> bool {
        matches!(self, BafnetError::Io { .. } | BafnetError::Image { .. })
    }
}

pub type Result<T, E = BafnetError> = std::result::Result<T, E>;

pub(crate) fn config_err(msg: impl Into<String>) -> BafnetError {
    BafnetError::Config(msg.into())
}

pub(crate) fn shape_err(msg: impl Into<String>) -> BafnetError {
    BafnetError::Shape(msg.into())
}

pub(crate) fn data_err(msg: impl Into<String>) -> BafnetError {
    BafnetError::Data(msg.into())
}
