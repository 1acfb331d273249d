//! Crate-wide error type. Variants carry enough context to act on: offending
//! key, parameter name, expected vs. found shape.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent configuration (bad value, mismatched budgets,
    /// unknown key, violated invariant).
    #[error("config error: {0}")]
    Config(String),

    /// Underlying filesystem failure, annotated with the path.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Malformed on-disk artifact (bad magic, truncated payload, bad JSON).
    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },

    /// Array shape does not match what the operation requires.
    #[error("shape error in {context}: expected {expected}, found {found}")]
    Shape {
        context: String,
        expected: String,
        found: String,
    },

    /// Request exceeds what can be materialized or satisfied.
    #[error("capacity error: {0}")]
    Capacity(String),

    /// Checkpoint transfer failed validation; nothing was applied.
    #[error("transfer error: {0}")]
    Transfer(String),

    /// Dataset contents do not support the requested operation.
    #[error("data error: {0}")]
    Data(String),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn format(path: impl AsRef<std::path::Path>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.as_ref().display().to_string(),
            reason: reason.into(),
        }
    }

    pub fn shape(
        context: impl Into<String>,
        expected: impl Into<String>,
        found: impl Into<String>,
    ) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.into(),
            found: found.into(),
        }
    }
}
