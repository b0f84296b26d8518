use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("zero feature row {row}: l2 normalization is undefined")]
    ZeroRow { row: usize },

    #[error("row {row} is fully masked; softmax has no support")]
    FullyMaskedRow { row: usize },

    #[error("singular matrix: pivot magnitude {pivot:e} in column {column}")]
    Singular { column: usize, pivot: f64 },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("degenerate batch of size {size}: at least 2 samples are required")]
    DegenerateBatch { size: usize },

    #[error("target row {row} sums to {sum}, expected 1")]
    NonStochasticTarget { row: usize, sum: f64 },

    #[error("label {label} at index {index} is out of range for {classes} classes")]
    LabelRange {
        index: usize,
        label: usize,
        classes: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Data(#[from] DataError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Problems with dataset or checkpoint files.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("{path}: truncated, expected {expected} bytes but found {actual}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("{path}: label {label} at record {index} is out of range for {classes} classes")]
    LabelRange {
        path: PathBuf,
        index: usize,
        label: usize,
        classes: usize,
    },

    #[error("{path}: {len} bytes is not a whole number of {stride}-byte records")]
    RecordStride {
        path: PathBuf,
        len: usize,
        stride: usize,
    },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
}
