use std::io;

use thiserror::Error;

pub type Result<T, E = FclError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FclError {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("non-finite value in {0}")]
    Numeric(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("pool holds {available} features but {requested} were requested")]
    InsufficientPool { requested: usize, available: usize },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("malformed {kind}: {message}")]
    Format { kind: &'static str, message: String },

    #[error("client {client_id}: {source}")]
    Client {
        client_id: u32,
        #[source]
        source: Box<FclError>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl FclError {
    pub(crate) fn dim(context: &'static str, expected: usize, actual: usize) -> Self {
        FclError::Dimension {
            context,
            expected,
            actual,
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        FclError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Errors caused by user-supplied configuration or input files, as opposed
    /// to failures while running.
    pub fn is_usage_error(&self) -> bool {
        match self {
            FclError::Config { .. } | FclError::Format { .. } => true,
            FclError::Dimension { context, .. } => context.starts_with("checkpoint"),
            FclError::Client { source, .. } => source.is_usage_error(),
            _ => false,
        }
    }
}
