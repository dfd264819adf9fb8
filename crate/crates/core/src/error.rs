use std::path::PathBuf;

use thiserror::Error;

use crate::library::ValidationReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: expected {expected}, got {actual}")]
    Dimension {
        op: &'static str,
        expected: String,
        actual: String,
    },

    #[error("{op}: input of {rows}x{cols} exceeds the limit of {limit}x{limit}")]
    Oversize {
        op: &'static str,
        rows: usize,
        cols: usize,
        limit: usize,
    },

    #[error("{0}: empty input")]
    Empty(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate adapter: {0}")]
    Degenerate(String),

    #[error("unknown general adapter `{name}` (available: {})", available.join(", "))]
    UnknownGeneral { name: String, available: Vec<String> },

    #[error("rank mismatch at {adapter}/{site}: {detail}")]
    RankMismatch {
        adapter: String,
        site: String,
        detail: String,
    },

    #[error("expert index {index} out of range for a library of {len} experts")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("signature mismatch: {0}")]
    Signature(String),

    #[error("library validation failed:\n{0}")]
    Validation(ValidationReport),

    #[error("checksum failure in blob `{blob}`: {detail}")]
    Checksum { blob: String, detail: String },

    #[error("unsupported format version `{found}` (expected `{expected}`)")]
    FormatVersion { found: String, expected: String },

    #[error("malformed container: {0}")]
    Format(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::Dimension {
            op,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wrap an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
