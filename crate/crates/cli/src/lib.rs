//! Experiment driver for jsa-tod: dataset generation, training runs, the MIS
//! ablation and the oracle checks, all reading one JSON config.

mod commands;
mod config;

use std::path::{Path, PathBuf};

pub use commands::*;
pub use config::*;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("oracle checks failed: {0}")]
    Oracle(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(jsa_tod::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Process exit status: 2 for bad configuration or input files, 3 for
    /// numeric failures, 4 for failed oracle checks, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Json(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Oracle(_) => 4,
            _ => 1,
        }
    }
}

impl From<jsa_tod::Error> for CliError {
    fn from(e: jsa_tod::Error) -> Self {
        use jsa_tod::Error as E;
        match e {
            E::Config(_) | E::Parse { .. } | E::Json(_) => CliError::Config(e.to_string()),
            E::Numeric(m) => CliError::Numeric(m),
            e => CliError::Core(e),
        }
    }
}
