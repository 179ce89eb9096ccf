use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("point cloud is empty")]
    EmptyCloud,

    #[error("point {index} has a non-finite coordinate")]
    NonFiniteCoordinate { index: usize },

    #[error("all points coincide; the cloud has zero extent")]
    ZeroExtent,

    #[error("point index {index} out of range for a cloud of {len} points")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("invalid neighborhood config: {0}")]
    InvalidNeighborhood(String),

    #[error("{count} point(s) have fewer than {required} neighbors (first ids: {ids:?})")]
    TooFewNeighbors {
        ids: Vec<usize>,
        count: usize,
        required: usize,
    },

    #[error("rotation matrix is not proper orthonormal")]
    InvalidRotation,

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("objective became non-finite at outer iteration {0}")]
    NonFiniteObjective(usize),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("unsupported ply construct: {0}")]
    UnsupportedPly(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
