use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad NIfTI magic number {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),

    #[error("malformed NIfTI header: {0}")]
    BadHeader(String),

    #[error("non-invertible affine (|det| = {0:e})")]
    SingularAffine(f64),

    #[error("label volumes must be integer-typed, found {0}")]
    NonIntegerLabels(&'static str),

    #[error("invalid label value {0}")]
    InvalidLabel(i64),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("{0} is empty")]
    Empty(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("collinear point set: cross-covariance has rank < 2")]
    Collinear,

    #[error("point count mismatch: {src} source vs {dst} target")]
    SizeMismatch { src: usize, dst: usize },

    #[error("{0}")]
    InvalidSweep(String),

    #[error("channel {0} not available in case")]
    MissingChannel(String),

    #[error("tumor not inside brain: {0} tumor voxels outside the brain mask")]
    TumorOutsideBrain(usize),

    #[error("external synthesizer failed ({status}): {stderr}")]
    ExternalFailed { status: String, stderr: String },

    #[error("external synthesizer timed out after {0} s")]
    ExternalTimeout(u64),

    #[error("expected {expected} frames, found {found}")]
    FrameCount { expected: usize, found: usize },

    #[error("image error in {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("file name sets differ; only in pred: {only_pred:?}; only in gt: {only_gt:?}")]
    NameMismatch {
        only_pred: Vec<String>,
        only_gt: Vec<String>,
    },

    #[error("undefined surface distance: {0} mask is empty")]
    UndefinedSurfaceDistance(&'static str),

    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),

    #[error("JSON error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}
