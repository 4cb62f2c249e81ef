//! Library surface of the command-line harness, exposed for integration
//! tests.

pub mod config;
pub mod feature_file;
pub mod gradcheck;
pub mod runner;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(String),
    #[error(transparent)]
    Core(#[from] gfss_core::Error),
}

impl CliError {
    /// Process exit code: 2 config, 3 io, 4 numerical abort, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Core(gfss_core::Error::Config(_)) => 2,
            CliError::Io(_) => 3,
            CliError::Core(gfss_core::Error::Numeric(_)) => 4,
            CliError::Core(_) => 1,
        }
    }
}
