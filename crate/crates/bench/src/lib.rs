//! Seeded experiment runner and reporting for the run-to-run controllers.

pub mod config;
pub mod report;
pub mod runner;

pub use config::ExperimentConfig;
pub use report::{compare_report, SummaryRow};
pub use runner::{Controller, Experiment};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("invalid config: {0}")]
    Invalid(String),

    #[error("i/o: {0}")]
    Io(String),

    #[error("malformed summary file {file}: {msg}")]
    Summary { file: String, msg: String },

    #[error(transparent)]
    Core(#[from] mfrl_core::Error),
}

impl From<std::io::Error> for BenchError {
    fn from(e: std::io::Error) -> Self {
        BenchError::Io(e.to_string())
    }
}

pub type Result<T, E = BenchError> = std::result::Result<T, E>;
