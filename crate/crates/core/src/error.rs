//! Error taxonomy shared by the library and the CLI.
//!
//! Every failure maps onto one of three process exit codes: configuration
//! errors (2), data errors (3), and numeric aborts (4).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: bad values, inconsistent flags, unusable grids.
    #[error("config error: {0}")]
    Config(String),

    /// Invalid or missing data: malformed scene files, checkpoint mismatches,
    /// unreadable paths.
    #[error("data error: {0}")]
    Data(String),

    /// Numeric failure: NaN/Inf surfaced where a finite value is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Shape mismatch in tensor or geometry operations.
    #[error("shape error: {0}")]
    Shape(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Shape(_) => 3,
            Error::Numeric(_) => 4,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Data(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
