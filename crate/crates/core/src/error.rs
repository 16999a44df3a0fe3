use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("page {page_id}: invalid {field}: {message}")]
    InvalidPage {
        page_id: String,
        field: String,
        message: String,
    },

    #[error("reference element {0} not found")]
    UnknownReference(u32),

    #[error("element {id} cannot be a reference for this step (kind {kind})")]
    WrongReferenceKind { id: u32, kind: String },

    #[error("page {page_id}: element {element_id} {problem}")]
    ReferenceCoverage {
        page_id: String,
        element_id: u32,
        problem: &'static str,
    },

    #[error("patch has zero area; coordinates cannot be normalized")]
    ZeroAreaPatch,

    #[error("inconsistent annotations on page {page_id}: {message}")]
    InconsistentAnnotations { page_id: String, message: String },

    #[error("shape mismatch in {op}: {message}")]
    Shape { op: &'static str, message: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("generator could not place page {page} without overlap after {attempts} attempts")]
    Infeasible { page: usize, attempts: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{0}")]
    Train(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, message: impl Into<String>) -> Self {
        Error::Shape {
            op,
            message: message.into(),
        }
    }
}
