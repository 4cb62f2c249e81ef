use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Error kinds shared by the whole crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible with the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// A value lies outside an operation's mathematical domain (e.g. log of
    /// a non-positive number).
    #[error("domain error: {0}")]
    Domain(String),
    /// A caller broke an API precondition.
    #[error("contract violation: {0}")]
    Contract(String),
    /// A configuration value is invalid or inconsistent.
    #[error("invalid config: {0}")]
    Config(String),
    /// Input data is malformed (labels out of range, bad payload sizes).
    #[error("bad data: {0}")]
    Data(String),
    /// Optimization produced a non-finite or runaway loss and was aborted.
    #[error("numerical abort: {0}")]
    Numeric(String),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
