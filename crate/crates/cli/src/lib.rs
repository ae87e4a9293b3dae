//! Library half of the `itrain` binary. Each subcommand is a function that
//! prints its results to stdout and reports failure as an [`Failure`]
//! carrying the process exit code.

pub mod client;
pub mod commands;
pub mod llm;

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    Success = 0,
    Invalid = 1,
    Connection = 2,
    Mismatch = 3,
}

#[derive(Debug)]
pub struct Failure {
    pub exit: Exit,
    pub message: String,
}

impl Failure {
    pub fn invalid(message: impl fmt::Display) -> Self {
        Self {
            exit: Exit::Invalid,
            message: message.to_string(),
        }
    }

    pub fn connection(message: impl fmt::Display) -> Self {
        Self {
            exit: Exit::Connection,
            message: message.to_string(),
        }
    }

    pub fn mismatch(message: impl fmt::Display) -> Self {
        Self {
            exit: Exit::Mismatch,
            message: message.to_string(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<client::ClientError> for Failure {
    fn from(e: client::ClientError) -> Self {
        match e {
            client::ClientError::Connection(_) => Failure::connection(e),
            _ => Failure::invalid(e),
        }
    }
}

pub type CliResult = Result<(), Failure>;
