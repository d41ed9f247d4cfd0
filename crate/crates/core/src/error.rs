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

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("truncated payload: need {expected} bytes, file has {actual}")]
    TruncatedPayload { expected: u64, actual: u64 },

    #[error("unsupported dtype {dtype:?} for tensor {name:?}")]
    UnsupportedDtype { name: String, dtype: String },

    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),

    #[error("tensor {0:?} contains non-finite values")]
    NonFinite(String),

    #[error("invalid tensor {name:?}: {reason}")]
    InvalidTensor { name: String, reason: String },

    #[error("parameter name mismatch for {name:?}: {reason}")]
    NameMismatch { name: String, reason: String },

    #[error("shape mismatch for {name:?}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix contains non-finite entries")]
    NonFiniteMatrix,

    #[error("SVD failed to converge on a {rows}x{cols} matrix")]
    SvdNoConvergence { rows: usize, cols: usize },

    #[error("eigendecomposition failed to converge on a {0}x{0} matrix")]
    EigenNoConvergence(usize),

    #[error("rank {k} out of range 1..={max}")]
    RankOutOfRange { k: usize, max: usize },

    #[error("invalid rank policy: {0}")]
    InvalidPolicy(String),

    #[error("need >= {need} tasks, got {got}")]
    TooFewTasks { need: usize, got: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("layer {name:?}: {source}")]
    Layer {
        name: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn in_layer(self, name: &str) -> Error {
        match self {
            e @ Error::Layer { .. } => e,
            e => Error::Layer {
                name: name.to_string(),
                source: Box::new(e),
            },
        }
    }
}
