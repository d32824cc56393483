use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed calibration: {0}")]
    MalformedCalibration(String),
    #[error("invalid rotation {name}: {detail}")]
    InvalidRotation { name: &'static str, detail: String },
    #[error("malformed scan: {len} bytes is not a multiple of 16")]
    MalformedScan { len: usize },
    #[error("incomplete frame {frame}: missing {}", missing.display())]
    IncompleteFrame { frame: String, missing: PathBuf },
    #[error("roi {roi} exceeds {width}x{height} image")]
    RoiOutOfBounds { roi: String, width: usize, height: usize },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("malformed bitstream: {0}")]
    MalformedBitstream(String),
    #[error("model mismatch: {0}")]
    ModelMismatch(String),
    #[error("rd curves do not overlap in quality")]
    NoOverlap,
    #[error("invalid rd curve {label}: {detail}")]
    InvalidCurve { label: String, detail: String },
    #[error("training diverged at step {step}: non-finite {component}")]
    Divergence { step: u64, component: &'static str },
    #[error("invalid config field `{field}`: {message}")]
    InvalidConfig { field: String, message: String },
    #[error("malformed {kind} file {}: {message}", path.display())]
    MalformedFile { kind: &'static str, path: PathBuf, message: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image {}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    /// A required input file does not exist.
    pub fn is_missing_file(&self) -> bool {
        match self {
            Error::IncompleteFrame { .. } => true,
            Error::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
            Error::Image {
                source: image::ImageError::IoError(e),
                ..
            } => e.kind() == std::io::ErrorKind::NotFound,
            _ => false,
        }
    }
}
