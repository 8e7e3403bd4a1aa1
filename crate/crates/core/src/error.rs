use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum FrocError {
    /// A numeric argument is outside the domain of the function.
    #[error("domain error: {0}")]
    Domain(String),

    /// Inputs are structurally unusable (empty lists, missing profiles, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// A record violates a type invariant.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("not found: {id}{}", nearest_hint(.nearest))]
    NotFound { id: String, nearest: Vec<String> },

    /// Malformed input text, located by 1-based line and column.
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: u64,
        column: usize,
        message: String,
    },

    #[error("unsupported schema version: found `{found}`, expected `{expected}`")]
    Version { found: String, expected: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("i/o error: {message} ({written} bytes written)")]
    Io { message: String, written: usize },
}

fn nearest_hint(nearest: &[String]) -> String {
    if nearest.is_empty() {
        String::new()
    } else {
        format!(" (nearest ids: {})", nearest.join(", "))
    }
}

impl FrocError {
    /// Short machine-readable tag, used as the CLI error prefix.
    pub fn kind(&self) -> &'static str {
        match self {
            FrocError::Domain(_) => "domain",
            FrocError::Config(_) => "config",
            FrocError::Validation(_) => "validation",
            FrocError::NotFound { .. } => "not-found",
            FrocError::Parse { .. } => "parse",
            FrocError::Version { .. } => "version",
            FrocError::Usage(_) => "usage",
            FrocError::Io { .. } => "io",
        }
    }

    pub(crate) fn io(err: std::io::Error, written: usize) -> Self {
        FrocError::Io {
            message: err.to_string(),
            written,
        }
    }
}

pub type Result<T> = std::result::Result<T, FrocError>;
