//! Command-line front end: config documents, embedded presets, experiment
//! dispatch and CSV/JSON artifacts.

pub mod config;
pub mod experiment;
pub mod presets;
pub mod trace;

use std::path::PathBuf;

pub use config::{ConfigDocument, ExperimentConfig, Mode, Overrides};
pub use experiment::{run_experiment, ExperimentReport, SeedTrace};
pub use trace::{aggregate, emit_trace, read_trace, write_aggregate, AggregateRow};

/// Exit status for unparseable or inconsistent configuration.
pub const EXIT_CONFIG: i32 = 2;
/// Exit status when the model fails assumption validation.
pub const EXIT_VALIDATION: i32 = 3;
/// Exit status for runtime failures, divergence and failed oracle checks.
pub const EXIT_FAILURE: i32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("assumption validation failed:\n{0}")]
    Validation(String),
    #[error(transparent)]
    Core(#[from] kfpo::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: {reason}")]
    Parse { path: PathBuf, reason: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Validation(_) => EXIT_VALIDATION,
            _ => EXIT_FAILURE,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}
