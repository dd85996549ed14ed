use std::io;

use thiserror::Error;

/// Errors raised anywhere in the training / evaluation engine.
#[derive(Debug, Error)]
pub enum ArlError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error in field `{field}`: {reason}")]
    Format { field: String, reason: String },

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("numerical error in `{tensor}`: {reason}")]
    Numerical { tensor: String, reason: String },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

impl ArlError {
    pub fn config(msg: impl Into<String>) -> Self {
        ArlError::Config(msg.into())
    }

    pub fn format(field: impl Into<String>, reason: impl Into<String>) -> Self {
        ArlError::Format {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn numerical(tensor: impl Into<String>, reason: impl Into<String>) -> Self {
        ArlError::Numerical {
            tensor: tensor.into(),
            reason: reason.into(),
        }
    }

    /// Short machine-readable tag, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            ArlError::Config(_) => "config",
            ArlError::Format { .. } => "format",
            ArlError::Dimension(_) => "dimension",
            ArlError::Numerical { .. } => "numerical",
            ArlError::DegenerateInput(_) => "degenerate",
            ArlError::Index(_) => "index",
            ArlError::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, ArlError>;
