use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing file: {}", path.display())]
    MissingFile { path: PathBuf },

    #[error("{file}:{line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },

    #[error("{file}:{line}: id {id} out of range for node type `{node_type}` (count {count})")]
    IdOutOfRange {
        file: String,
        line: usize,
        node_type: String,
        id: u64,
        count: usize,
    },

    #[error("{file}:{line}: expected {expected} feature columns, found {found}")]
    FeatureDim {
        file: String,
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("{file}: target node {node} has no split assignment")]
    MissingSplit { file: String, node: usize },

    #[error("{file}: target node {node} has no label")]
    MissingLabel { file: String, node: usize },

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("invalid relation: {0}")]
    Structure(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("batch views do not cover target node {node} (batch size {batch_size})")]
    CoverageGap { node: usize, batch_size: usize },

    #[error("degenerate attention: {0}")]
    DegenerateAttention(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}: ce={ce}, diversity={diversity}, total={total}")]
    Diverged {
        epoch: usize,
        ce: f64,
        diversity: f64,
        total: f64,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// True for errors caused by bad input data or configuration rather than
    /// by a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::MissingFile { .. }
                | Error::Parse { .. }
                | Error::IdOutOfRange { .. }
                | Error::FeatureDim { .. }
                | Error::MissingSplit { .. }
                | Error::MissingLabel { .. }
                | Error::Manifest(_)
                | Error::Structure(_)
                | Error::Config(_)
                | Error::InvalidArgument(_)
        )
    }
}
