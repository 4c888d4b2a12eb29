use std::path::PathBuf;

/// Coarse failure classes, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Io,
    Numerical,
    Contract,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("unrecognized container (bad magic {found:?})")]
    UnrecognizedContainer { found: [u8; 4] },
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated container: {0}")]
    Truncated(String),
    #[error("invalid container header: {0}")]
    Header(String),
    #[error("shape mismatch at layer {layer}: declared {declared:?}, stored {stored:?}")]
    LayerShapeMismatch {
        layer: usize,
        declared: Vec<usize>,
        stored: Vec<usize>,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unsupported layer kind {kind} at index {index}")]
    UnsupportedLayer { index: usize, kind: String },
    #[error("out of bounds: {0}")]
    OutOfBounds(String),
    #[error("degenerate embedding: {0}")]
    DegenerateEmbedding(String),
    #[error("homography unavailable: {0}")]
    HomographyUnavailable(String),
    #[error("metric undefined: {0}")]
    MetricUndefined(String),
    #[error("{0}")]
    Contract(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Io { .. }
            | Error::Image { .. }
            | Error::UnrecognizedContainer { .. }
            | Error::UnsupportedVersion(_)
            | Error::Truncated(_)
            | Error::Header(_)
            | Error::LayerShapeMismatch { .. }
            | Error::Json(_) => ErrorClass::Io,
            Error::DegenerateEmbedding(_)
            | Error::HomographyUnavailable(_)
            | Error::MetricUndefined(_) => ErrorClass::Numerical,
            Error::Shape(_)
            | Error::InvalidArgument(_)
            | Error::UnsupportedLayer { .. }
            | Error::OutOfBounds(_)
            | Error::Contract(_) => ErrorClass::Contract,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
