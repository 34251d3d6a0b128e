use thiserror::Error;

/// Errors raised anywhere in the lab.
///
/// Variants map onto the failure classes the CLI turns into exit codes:
/// configuration problems, misuse of an API, numeric breakdown, sampling
/// preconditions and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric error in {context}: {message}")]
    Numeric { context: String, message: String },

    #[error("non-finite loss at iteration {iteration} ({detail}); mini-batch samples {sample_ids:?}")]
    NonFiniteLoss {
        iteration: u64,
        sample_ids: Vec<u64>,
        detail: String,
    },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("missing controls: {0}")]
    MissingControls(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn numeric(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Numeric {
            context: context.into(),
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Error::Usage(message.into())
    }
}
