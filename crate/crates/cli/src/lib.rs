//! `audit` command implementations, callable from tests without a process.

mod analyze;
mod plot;
mod run;
mod validate;

use std::fmt;

pub use analyze::{cmd_analyze, AnalyzeArgs, EmbedderChoice, ReportBundle, RunSummary};
pub use run::{cmd_run, load_config, RunArgs};
pub use validate::{cmd_validate, FileReport, ValidateArgs, ValidationReport};

pub const EXIT_OK: u8 = 0;
/// Bad input: config, corpus, arguments, or an archive that cannot be used.
pub const EXIT_USER: u8 = 1;
/// Failure while doing the work: I/O, store, embedding backend.
pub const EXIT_RUNTIME: u8 = 2;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub error: anyhow::Error,
}

impl CliError {
    pub fn user(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: EXIT_USER,
            error: error.into(),
        }
    }

    pub fn runtime(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: EXIT_RUNTIME,
            error: error.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

impl std::error::Error for CliError {}

pub type CliResult<T> = Result<T, CliError>;
