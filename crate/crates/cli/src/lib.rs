//! Experiment driver around `fedsiam-core`: flat-file configs, the
//! partition/train/evaluate/sweep/plot verbs, and artifact layout.

use std::fmt;

pub mod config;
pub mod experiment;
pub mod plot;
pub mod sweep;

/// Failures split by exit code: bad configuration (exit 1) versus failures
/// of a well-formed run (exit 2).
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "config: {msg}"),
            CliError::Runtime(msg) => write!(f, "{msg}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<fedsiam_core::Error> for CliError {
    fn from(e: fedsiam_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}
