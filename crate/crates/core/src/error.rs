use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("shape inference failed at layer `{layer}`: {reason}")]
    ShapeInference { layer: String, reason: String },

    #[error("tape is stale: recorded at parameter version {tape}, network is at {network}")]
    StaleTape { tape: u64, network: u64 },

    #[error("key sets differ: {0}")]
    KeyMismatch(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("bad magic in {what}: found {found:?}")]
    BadMagic { what: &'static str, found: Vec<u8> },

    #[error("unsupported {what} version {found} (expected {expected})")]
    UnsupportedVersion {
        what: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("unsupported NIfTI datatype code {0} (int16=4 and float32=16 are supported)")]
    UnsupportedDatatype(i16),

    #[error("unsupported image rank {0} (expected 3)")]
    UnsupportedRank(usize),

    #[error("truncated {what}: {detail}")]
    Truncated { what: String, detail: String },

    #[error("checkpoint does not match the requested configuration: {0}")]
    ConfigMismatch(String),

    #[error("manifest {path}: line {line}: {reason}")]
    Manifest {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("subject leakage across splits: {}", .0.join(", "))]
    Leakage(Vec<String>),

    #[error("split contract violated: {0}")]
    SplitViolation(String),

    #[error("{0}")]
    UndefinedMetric(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config text: {0}")]
    ConfigText(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
