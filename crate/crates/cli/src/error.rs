use std::fmt;

use dkm::DkmError;

/// A failed command, classified by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or inputs; exit code 2.
    Config(String),
    /// The numerics broke down; exit code 1.
    Numerical(String),
    /// Anything else (I/O while writing results); exit code 1.
    Other(anyhow::Error),
}

impl CliError {
    pub fn key(key: &str, message: impl fmt::Display) -> Self {
        CliError::Config(format!("`{key}`: {message}"))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) | CliError::Other(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
            CliError::Other(e) => write!(f, "{e:#}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<DkmError> for CliError {
    fn from(e: DkmError) -> Self {
        match e {
            e if e.is_numerical() => CliError::Numerical(e.to_string()),
            DkmError::Config(_)
            | DkmError::InvalidInput(_)
            | DkmError::Degenerate(_)
            | DkmError::Parse { .. } => CliError::Config(e.to_string()),
            other => CliError::Other(other.into()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Other(e.into())
    }
}
