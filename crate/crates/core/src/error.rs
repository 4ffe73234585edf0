//! Error taxonomy shared by the whole crate.
//!
//! Three coarse kinds so callers (and the CLI exit-code mapping) can tell
//! bad configuration, bad data, and numeric failure apart.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or invalid arguments to an operation.
    #[error("config error: {0}")]
    Config(String),

    /// Missing, malformed, or inconsistent input data.
    #[error("data error: {0}")]
    Data(String),

    /// Non-finite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, Error>;

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
}
