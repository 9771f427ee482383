//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent dimensions or an invalid configuration value.
    #[error("configuration error: {0}")]
    Config(String),

    /// A non-finite value appeared; `stage` names the pipeline stage that
    /// produced it.
    #[error("numeric error in stage `{stage}`: {detail}")]
    Numeric { stage: &'static str, detail: String },

    /// A training step could not proceed (singular implicit system, too many
    /// skipped batches, ...).
    #[error("training error: {0}")]
    Training(String),

    /// Malformed input data (CSV rows, schema files, prediction files).
    #[error("data error: {0}")]
    Data(String),

    /// Checkpoint or encoder serialization problems.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numeric(stage: &'static str, detail: impl Into<String>) -> Self {
        Error::Numeric {
            stage,
            detail: detail.into(),
        }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
