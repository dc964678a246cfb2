use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed manifest {}: {source}", path.display())]
    Manifest {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("non-finite intermediate at layer {layer}")]
    NonFiniteActivation { layer: usize },

    #[error("unsupported layer: {0}")]
    Unsupported(String),

    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index {index} out of range for {what} of length {len}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    /// The pruned channel's BN scale is (numerically) zero; its output is a
    /// constant and cannot be represented through weights.
    #[error("channel {channel} has |gamma| below threshold; prune without compensation")]
    DeadChannel { channel: usize },

    #[error("singular normal equations (pivot {pivot} at row {row}); use a positive ridge")]
    Singular { row: usize, pivot: f64 },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    /// True for errors caused by the filesystem rather than by content.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::MissingFile(_) | Error::Io { .. })
    }
}
