use thiserror::Error;

/// Errors raised by the estimation routines.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid parameters, configuration or inputs supplied by the caller.
    #[error("configuration error: {0}")]
    Config(String),

    /// A computation hit a degenerate numerical state (zero mass, reducible chain, ...).
    #[error("numerical degeneracy: {0}")]
    Degenerate(String),

    /// A documented precondition of an operation does not hold.
    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn degenerate(msg: impl Into<String>) -> Self {
        Error::Degenerate(msg.into())
    }

    pub(crate) fn precondition(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }

    /// Process exit code associated with this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Precondition(_) | Error::Json(_) => 2,
            Error::Degenerate(_) => 3,
            Error::Io(_) | Error::Csv(_) => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
