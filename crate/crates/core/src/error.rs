use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("capacity exceeded: {what} needs {requested} bits, limit is {limit}")]
    Capacity {
        what: &'static str,
        requested: usize,
        limit: usize,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("divergence is infinite: p1 has mass {mass:e} at state {index} where p2 is zero")]
    InfiniteDivergence { index: usize, mass: f64 },

    #[error("distribution is not strictly positive: state {index} has probability {value:e}")]
    NotPositive { index: usize, value: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged: non-finite objective in sweep {sweep} (layer {layer})")]
    TrainingDiverged { sweep: usize, layer: usize },

    #[error("stability matrix column {column} is not finite")]
    NonFiniteColumn { column: usize },

    #[error("no unstable direction: Fisher information is numerically zero (max |F| = {max_abs:e})")]
    NoUnstableDirection { max_abs: f64 },

    #[error("decode violated: poisoned output does not round back to its clean label")]
    DecodeViolated,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("unknown task `{0}` (expected copy, parity or teacher)")]
    UnknownTask(String),

    #[error("schema error at `{path}`: {message}")]
    Schema { path: String, message: String },

    #[error("unsupported format_version {found} (this build reads {expected})")]
    Version { found: u64, expected: u64 },

    #[error("artifact hash mismatch: {0}")]
    HashMismatch(String),

    #[error("pipeline stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn schema(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for malformed inputs (files, flags, configs) as opposed to
    /// failures of the computation itself.
    pub fn is_usage(&self) -> bool {
        match self {
            Error::Schema { .. }
            | Error::Version { .. }
            | Error::HashMismatch(_)
            | Error::UnknownTask(_)
            | Error::InvalidArgument(_)
            | Error::Io { .. } => true,
            Error::Stage { source, .. } => source.is_usage(),
            _ => false,
        }
    }
}
