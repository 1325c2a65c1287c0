//! Error type shared across the crate.

use std::path::PathBuf;

/// Errors reported by reconstruction, simulation and file-format code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid pose: {0}")]
    InvalidPose(String),

    #[error("pixel index ({row}, {col}) outside detector extent {rows}x{cols}")]
    PixelOutOfRange {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },

    #[error("scene bounds must satisfy min < max componentwise")]
    DegenerateBounds,

    #[error("sigma_init must be positive, got {0}")]
    NonPositiveSigmaInit(f64),

    #[error("grid dimensions must all be >= 1")]
    EmptyGridDims,

    #[error("temporal upscaling requires at least 2 time knots, grid has 1")]
    UpscaleSingleKnot,

    #[error("spatial upscaling cannot shrink: {old:?} -> {new:?}")]
    UpscaleShrinks { old: [usize; 3], new: [usize; 3] },

    #[error("occupancy threshold must be positive, got {0}")]
    NonPositiveThreshold(f64),

    #[error("view count must be >= 1")]
    NoViews,

    #[error("loss batch is empty")]
    EmptyBatch,

    #[error("invalid train config: {0}")]
    InvalidTrainConfig(String),

    #[error("shape mismatch: left is {left:?}, right is {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },

    #[error("image {rows}x{cols} is smaller than the {window}x{window} filter window")]
    ImageTooSmall {
        rows: usize,
        cols: usize,
        window: usize,
    },

    #[error("peak value must be positive, got {0}")]
    NonPositivePeak(f64),

    #[error("{path}: malformed graymap header: {detail}")]
    PgmMalformedHeader { path: PathBuf, detail: String },

    #[error("{path}: graymap maxval must be 65535, found {found}")]
    PgmWrongMaxval { path: PathBuf, found: u64 },

    #[error("{path}: truncated graymap data: expected {expected} bytes, found {found}")]
    PgmTruncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("{path}: header declares {header_len} values but payload holds {payload_len}")]
    PayloadLengthMismatch {
        path: PathBuf,
        header_len: usize,
        payload_len: usize,
    },

    #[error("{path}: unsupported format version {found} (supported: {supported})")]
    UnsupportedFormatVersion {
        path: PathBuf,
        found: u32,
        supported: u32,
    },

    #[error("manifest view {view}: {reason}")]
    ManifestView { view: usize, reason: String },

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
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

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
