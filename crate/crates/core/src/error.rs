//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the laboratory.
#[derive(Debug, Error)]
pub enum LabError {
    /// A configuration value violates one of its invariants.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// An argument lies outside the domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A caller broke the contract of an operation (e.g. an unsupported
    /// combination of episode fields).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A non-finite value appeared in a forward or backward pass.
    #[error("non-finite value in {stage} at layer {layer}")]
    Numeric { stage: &'static str, layer: usize },

    /// Training diverged.
    #[error("training diverged at step {step}: {reason}")]
    Training { step: usize, reason: String },

    /// A checkpoint file is malformed or incompatible.
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    /// One or more records in a data file failed validation.
    #[error("{path}: {}", format_record_errors(.errors))]
    Records {
        path: PathBuf,
        errors: Vec<RecordError>,
    },

    /// An internal consistency check failed.
    #[error("internal error: {0}")]
    Internal(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// A validation failure tied to a 1-based line number.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordError {
    pub line: usize,
    pub message: String,
}

fn format_record_errors(errors: &[RecordError]) -> String {
    let lines: Vec<String> = errors
        .iter()
        .map(|e| format!("line {}: {}", e.line, e.message))
        .collect();
    lines.join("; ")
}

impl LabError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
