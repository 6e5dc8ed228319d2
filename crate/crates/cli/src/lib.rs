//! Config-driven pipeline stages and experiment sweeps over the `mixnoise` library.

use std::path::PathBuf;

use thiserror::Error;

pub mod config;
pub mod experiment;
pub mod manifest;
pub mod stages;

/// Errors surfaced by the CLI, each with its own exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing upstream artifact `{}`; run the stage that produces it first", .0.display())]
    Dependency(PathBuf),

    #[error("trial failed: {0}")]
    Trial(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Dependency(_) => 3,
            CliError::Trial(_) => 4,
        }
    }
}

impl From<mixnoise::Error> for CliError {
    fn from(e: mixnoise::Error) -> Self {
        match e {
            mixnoise::Error::Config(msg) => CliError::Config(msg),
            mixnoise::Error::Dependency(path) => CliError::Dependency(path),
            other => CliError::Trial(other.to_string()),
        }
    }
}
