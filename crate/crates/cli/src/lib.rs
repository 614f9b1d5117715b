//! Experiment harness behind the `mi-decode` binary.

use std::fmt::Display;

use thiserror::Error;

pub mod config;
pub mod inspect;
pub mod report;
pub mod runner;

/// Failure classes, each with its own process exit code.
#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error("data error: {0}")]
    Data(String),
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl HarnessError {
    pub fn data(e: impl Display) -> Self {
        HarnessError::Data(e.to_string())
    }

    pub fn runtime(e: impl Display) -> Self {
        HarnessError::Runtime(e.to_string())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Data(_) => 3,
            HarnessError::Runtime(_) => 4,
        }
    }
}
