use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, UniKdError>;

#[derive(Debug, Error)]
pub enum UniKdError {
    /// A caller broke an operation's precondition (shapes, ranges, finiteness).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Cholesky factorization hit a non-positive pivot.
    #[error("matrix is not positive definite: pivot {index} is {pivot:e}")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss component `{component}` at step {step}")]
    NonFiniteLoss { component: &'static str, step: usize },

    #[error("missing teacher checkpoint {0}")]
    MissingTeacher(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl UniKdError {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        UniKdError::Contract(msg.into())
    }
}

macro_rules! ensure {
    ($cond:expr, $($arg:tt)*) => {
        if !$cond {
            return Err($crate::error::UniKdError::Contract(format!($($arg)*)));
        }
    };
}
pub(crate) use ensure;
