use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum CellError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("schema error at line {line}: expected {expected} fields, found {found}")]
    Schema {
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("no instances")]
    Empty,

    #[error("invalid config: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("field {field}: index {index} out of range for cardinality {cardinality}")]
    OutOfRange {
        field: usize,
        index: usize,
        cardinality: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("labels contain a single class: {0}")]
    SingleClass(String),

    #[error("empty model: every feature and interaction was discarded")]
    EmptyModel,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<CellError>,
    },
}

impl CellError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CellError::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        CellError::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// True for errors caused by bad input or configuration rather than a
    /// numerical or internal failure.
    pub fn is_user_error(&self) -> bool {
        match self {
            CellError::Io { .. }
            | CellError::Parse { .. }
            | CellError::Schema { .. }
            | CellError::Empty
            | CellError::Config(_)
            | CellError::OutOfRange { .. }
            | CellError::SingleClass(_)
            | CellError::EmptyModel
            | CellError::Checkpoint(_) => true,
            CellError::Shape(_) | CellError::NonFinite(_) => false,
            CellError::Stage { source, .. } => source.is_user_error(),
        }
    }
}

pub type Result<T, E = CellError> = std::result::Result<T, E>;
