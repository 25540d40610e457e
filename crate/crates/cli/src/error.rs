use std::path::PathBuf;

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("{path}: hash mismatch (expected {expected}, found {found})")]
    HashMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("missing artifacts: {}", .0.join(", "))]
    MissingArtifacts(Vec<String>),
    #[error(transparent)]
    Core(#[from] cfsim::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Machine-readable error written to stderr.
#[derive(Debug, Serialize)]
pub struct ErrorReport {
    pub error: &'static str,
    pub message: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub missing: Vec<String>,
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) | CliError::Core(cfsim::Error::InvalidParameter(_)) => "config",
            CliError::HashMismatch { .. } | CliError::Core(cfsim::Error::HashMismatch { .. }) => "hash-mismatch",
            CliError::MissingArtifacts(_) | CliError::Core(cfsim::Error::MissingArtifacts(_)) => "missing-artifacts",
            CliError::Core(cfsim::Error::Io { .. }) => "io",
            CliError::Core(_) => "runtime",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind() {
            "config" => 2,
            "missing-artifacts" => 3,
            "hash-mismatch" => 4,
            "io" => 5,
            _ => 1,
        }
    }

    pub fn report(&self) -> ErrorReport {
        let missing = match self {
            CliError::MissingArtifacts(m) | CliError::Core(cfsim::Error::MissingArtifacts(m)) => m.clone(),
            _ => Vec::new(),
        };
        ErrorReport {
            error: self.kind(),
            message: self.to_string(),
            missing,
        }
    }
}
