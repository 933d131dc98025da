use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

/// Failure classes with their process exit codes.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{message}")]
    Usage { message: String },
    #[error("{message}")]
    MissingInput { message: String, diagnostics: Vec<String> },
    #[error("cannot parse {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn missing(message: impl Into<String>, diagnostics: Vec<String>) -> Self {
        Self::MissingInput { message: message.into(), diagnostics }
    }

    pub fn parse(path: &Path, message: impl ToString) -> Self {
        Self::Parse { path: path.to_path_buf(), message: message.to_string() }
    }

    pub fn numeric(e: impl ToString) -> Self {
        Self::Numeric(e.to_string())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage { .. } => 2,
            Self::MissingInput { .. } | Self::Parse { .. } | Self::Io { .. } => 3,
            Self::Numeric(_) => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Usage { .. } => "usage",
            Self::MissingInput { .. } => "missing_input",
            Self::Parse { .. } => "parse_error",
            Self::Io { .. } => "io_error",
            Self::Numeric(_) => "numeric_failure",
        }
    }
}

/// Machine-readable error line written to stderr.
#[derive(Debug, Serialize)]
pub struct ErrorRecord {
    pub error: &'static str,
    pub exit_code: i32,
    pub message: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

impl ErrorRecord {
    /// Classifies an error chain; errors without a known class count as input
    /// errors.
    pub fn from_anyhow(e: &anyhow::Error) -> Self {
        let message = format!("{e:#}");
        match e.chain().find_map(|c| c.downcast_ref::<CliError>()) {
            Some(c) => Self {
                error: c.kind(),
                exit_code: c.exit_code(),
                message,
                diagnostics: match c {
                    CliError::MissingInput { diagnostics, .. } => diagnostics.clone(),
                    _ => Vec::new(),
                },
            },
            None => Self { error: "input_error", exit_code: 3, message, diagnostics: Vec::new() },
        }
    }
}
