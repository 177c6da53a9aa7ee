//! Error type shared across the crate.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// A caller-supplied argument violates an operation's precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An operation was invoked on a state that cannot serve it
    /// (e.g. decoding a terminal rollout, refreshing an empty pool).
    #[error("invalid state: {0}")]
    InvalidState(String),

    /// A solution or instance failed feasibility/invariant checks.
    #[error("validation failed: {0}")]
    Validation(String),

    /// A file could not be parsed; `line` is 1-based.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// The file is syntactically valid but uses a feature we do not support.
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    /// An external solver binary misbehaved; `output` carries captured
    /// stdout/stderr for diagnosis.
    #[error("external solver failed: {msg}\ncaptured output:\n{output}")]
    ExternalSolver { msg: String, output: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid_argument(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn invalid_state(msg: impl Into<String>) -> Self {
        Error::InvalidState(msg.into())
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
}
