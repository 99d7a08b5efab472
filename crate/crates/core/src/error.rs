use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("undefined ratio: {0}")]
    UndefinedRatio(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("schema violation in {context}: {message}")]
    Schema { context: String, message: String },

    #[error("unsupported {kind} version {found} (expected {expected})")]
    Version {
        kind: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("generation failed for scenario {scenario}: {reason}")]
    Generation { scenario: String, reason: String },

    #[error("file not found: {}", .0.display())]
    NotFound(PathBuf),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn schema(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            context: context.into(),
            message: message.into(),
        }
    }

    /// Stable short name used in machine-readable error documents.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::UndefinedRatio(_) => "undefined_ratio",
            Error::Config(_) => "config",
            Error::Schema { .. } => "schema",
            Error::Version { .. } => "version",
            Error::Generation { .. } => "generation",
            Error::NotFound(_) => "not_found",
            Error::Io { .. } => "io",
            Error::Json { .. } => "json",
        }
    }
}
