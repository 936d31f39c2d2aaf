use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    /// Malformed model input, e.g. an out-of-range token id.
    #[error("input error: {0}")]
    Input(String),
    #[error("config error: {0}")]
    Config(String),
    /// API misuse detected at runtime.
    #[error("usage error: {0}")]
    Usage(String),
    /// Training produced non-finite values too many steps in a row.
    #[error("training diverged: {streak} consecutive non-finite steps ending at step {step}")]
    Diverged { step: u64, streak: u32 },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// True when the failure came from a NaN or infinity in the forward pass.
    pub fn is_non_finite(&self) -> bool {
        matches!(self, Error::Tensor(TensorError::NonFinite { .. }))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
