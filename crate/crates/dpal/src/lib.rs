//! Files, configuration, reports and the command-line surface around `dpal-core`.

use std::path::Path;

pub mod commands;
pub mod config;
pub mod container;
pub mod report;
pub mod store;

pub use config::RunConfig;

/// Command failures, grouped by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("format: {0}")]
    Format(String),
    #[error(transparent)]
    Core(#[from] dpal_core::Error),
    #[error("verification failed: {0}")]
    Verification(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// 1 for a failed verification, 2 for usage, configuration and IO errors.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Verification(_) => 1,
            _ => 2,
        }
    }
}

impl From<config::ConfigError> for CliError {
    fn from(e: config::ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<container::ContainerError> for CliError {
    fn from(e: container::ContainerError) -> Self {
        match e {
            container::ContainerError::Io { path, source } => CliError::Io { path, source },
            e @ container::ContainerError::Format { .. } => CliError::Format(e.to_string()),
        }
    }
}
