use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    Shape {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("training error{}{}: {message}", step.map(|s| format!(" at step {s}")).unwrap_or_default(), layer.map(|l| format!(" in layer {l}")).unwrap_or_default())]
    Training {
        step: Option<usize>,
        layer: Option<usize>,
        message: String,
    },

    #[error("sampling error in scope [{scope}]: {message}")]
    Sampling { scope: String, message: String },

    #[error("routing error: vertical `{vertical}` {message}")]
    Routing { vertical: String, message: String },

    #[error("invalid spec: {0}")]
    Spec(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: String, expected: u32 },

    #[error("comparison error: {0}")]
    Comparison(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(context: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
