use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum DkmError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Cholesky failed even after the largest jitter was added.
    #[error("factorization of {what} failed after adding jitter {jitter:e}")]
    Factorization { what: String, jitter: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("non-finite {what} at iteration {iteration}{}", layer.map(|l| format!(" (layer {l})")).unwrap_or_default())]
    NonFinite {
        what: String,
        iteration: usize,
        layer: Option<usize>,
    },

    #[error("chain {chain} diverged at step {step} (log density {value:e})")]
    Diverged {
        chain: usize,
        step: usize,
        value: f64,
    },

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DkmError {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            DkmError::Factorization { .. }
                | DkmError::Numerical(_)
                | DkmError::NonFinite { .. }
                | DkmError::Diverged { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, DkmError>;

pub(crate) fn invalid(msg: impl Into<String>) -> DkmError {
    DkmError::InvalidInput(msg.into())
}
