//! Crate-wide error type with process exit-code mapping for the CLI.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("dimension mismatch: {0}")]
    Dim(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("auth failure: {0}")]
    AuthFailure(String),

    #[error("service unavailable: {0}")]
    ServiceUnavailable(String),

    #[error("resolution failed: {0}")]
    ResolutionFailed(String),

    #[error("malformed response: {0}")]
    MalformedResponse(String),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit status the CLI reports for this error.
    ///
    /// 1 = usage/config, 2 = data validation, 3 = external service.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::AuthFailure(_) => 1,
            Error::ServiceUnavailable(_) | Error::ResolutionFailed(_) | Error::MalformedResponse(_) => 3,
            _ => 2,
        }
    }
}
