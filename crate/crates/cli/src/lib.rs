//! Experiment orchestration for the flux/exit-statistics laboratory:
//! config parsing, subcommand execution, deterministic run manifests.

use thiserror::Error;

pub mod commands;
pub mod config;
pub mod manifest;

pub use commands::{run, Command, ExitMethod, Overrides};
pub use config::{parse_raw, RawConfig};
pub use manifest::RunManifest;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error (line {line}): {message}")]
    Config { line: usize, message: String },
    #[error("{context}: {source}")]
    Core {
        context: String,
        #[source]
        source: qflux_core::CoreError,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("usage error: {0}")]
    Usage(String),
}

impl CliError {
    /// One-line machine-readable record for stderr.
    pub fn record(&self) -> String {
        let kind = match self {
            CliError::Config { .. } => "config",
            CliError::Core { .. } => "core",
            CliError::Io(_) => "io",
            CliError::Usage(_) => "usage",
        };
        format!("error\t{kind}\t{self}")
    }
}

pub(crate) trait Ctx<T> {
    fn ctx(self, context: &str) -> Result<T, CliError>;
}

impl<T> Ctx<T> for Result<T, qflux_core::CoreError> {
    fn ctx(self, context: &str) -> Result<T, CliError> {
        self.map_err(|source| CliError::Core {
            context: context.to_string(),
            source,
        })
    }
}
