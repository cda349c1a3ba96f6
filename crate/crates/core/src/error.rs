use thiserror::Error;

/// Crate-wide error type.
///
/// `Config` maps to CLI exit code 2, everything else to exit code 1.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("world generation: {0}")]
    Generation(String),
    #[error("query: {0}")]
    Query(String),
    #[error("planning: {0}")]
    Planning(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("log format: {0}")]
    LogFormat(String),
    #[error("run diverged: {0}")]
    Divergence(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
