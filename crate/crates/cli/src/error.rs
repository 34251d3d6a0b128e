//! Command-line failures and their exit codes.

use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("non-finite loss at iteration {iteration}; diagnostics written to {}", dump.display())]
    NonFiniteLoss { iteration: u64, dump: PathBuf },

    #[error("missing controls: {0}")]
    MissingControls(String),

    #[error("{failed} of {total} experiment cells failed")]
    CellsFailed { failed: usize, total: usize },

    #[error(transparent)]
    Core(cdcl_core::Error),
}

impl CliError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Process exit status for this failure.
    pub fn exit_code(&self) -> i32 {
        use cdcl_core::Error as E;
        match self {
            CliError::Config { .. } => 2,
            CliError::Io { .. } => 3,
            CliError::NonFiniteLoss { .. } => 4,
            CliError::MissingControls(_) => 5,
            CliError::CellsFailed { .. } => 6,
            CliError::Core(e) => match e {
                E::Config { .. } => 2,
                E::Io(_) | E::Json(_) | E::Csv(_) | E::Format(_) => 3,
                E::NonFiniteLoss { .. } | E::Numeric { .. } => 4,
                E::MissingControls(_) => 5,
                E::Shape(_) | E::Usage(_) | E::Sampling(_) => 1,
            },
        }
    }
}

impl From<cdcl_core::Error> for CliError {
    fn from(e: cdcl_core::Error) -> Self {
        match e {
            cdcl_core::Error::Config { field, message } => CliError::Config { field, message },
            cdcl_core::Error::MissingControls(m) => CliError::MissingControls(m),
            other => CliError::Core(other),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}
