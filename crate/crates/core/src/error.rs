use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Shape disagreement between operands.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    /// Cholesky factorization hit a non-positive pivot.
    #[error("matrix not positive definite: pivot {pivot} failed")]
    NotPositiveDefinite { pivot: usize },

    /// A gradient became NaN during optimization.
    #[error("NaN gradient in tensor '{tensor}' at step {step}")]
    NanGradient { tensor: String, step: usize },

    /// Training loss blew up or became non-finite.
    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },

    /// A referenced checkpoint file does not exist or is unreadable.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Malformed configuration or data file.
    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
