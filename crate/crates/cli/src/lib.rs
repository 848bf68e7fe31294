//! Command-line front end: run configuration and the subcommands behind the
//! `diffwin` binary.

pub mod commands;
pub mod config;

use std::fmt;

use diffwin::Error;

pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_GRADCHECK: i32 = 4;

/// An error paired with the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub error: Error,
}

impl Failure {
    /// Anything wrong with a checkpoint file, including its embedded config.
    pub fn checkpoint(error: Error) -> Self {
        Self { code: EXIT_IO, error }
    }
}

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        let code = match error {
            Error::Io { .. } | Error::Checkpoint(_) => EXIT_IO,
            Error::NonFinite { .. } => EXIT_NUMERIC,
            _ => EXIT_CONFIG,
        };
        Self { code, error }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.error.fmt(f)
    }
}
