use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("invalid shape {shape:?}: every extent must be positive")]
    InvalidShape { shape: Vec<usize> },
    #[error("shape {shape:?} needs {expected} values, got {got}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("maxpool2d needs even spatial dims, got {height}x{width}")]
    OddSpatial { height: usize, width: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("parameter {index} has no gradient")]
    MissingGrad { index: usize },
    #[error("learning rate must be finite and non-negative, got {0}")]
    InvalidLearningRate(f64),
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("mask for block {block} is {got_h}x{got_w}, activation is {want_h}x{want_w}")]
    MaskShape {
        block: usize,
        got_h: usize,
        got_w: usize,
        want_h: usize,
        want_w: usize,
    },
    #[error("block {0} does not exist")]
    NoSuchBlock(usize),
    #[error("batch shape {got:?} does not match model input {want:?}")]
    InputShape { got: Vec<usize>, want: [usize; 3] },
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic, not a checkpoint")]
    BadMagic { path: PathBuf },
    #[error("{path}: truncated at byte {offset}")]
    Truncated { path: PathBuf, offset: usize },
    #[error("{path}: unknown parameter {name:?}")]
    UnknownParameter { path: PathBuf, name: String },
    #[error("{path}: parameter {name:?} has shape {got:?}, expected {want:?}")]
    ParameterShape {
        path: PathBuf,
        name: String,
        got: Vec<usize>,
        want: Vec<usize>,
    },
    #[error("{path}: {detail}")]
    Malformed { path: PathBuf, detail: String },
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("example {id} has no ground-truth annotation")]
    MissingAnnotation { id: usize },
    #[error("annotation is not binary: value {value} at index {index}")]
    NonBinaryAnnotation { index: usize, value: f64 },
    #[error("annotation {got_h}x{got_w} cannot be reduced to {want_h}x{want_w}")]
    AnnotationShape {
        got_h: usize,
        got_w: usize,
        want_h: usize,
        want_w: usize,
    },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("non-finite value detected: {0}")]
    NonFinite(String),
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("{path}: {detail}")]
    DimensionMismatch { path: PathBuf, detail: String },
    #[error("invalid generator parameter: {0}")]
    Parameter(String),
}

impl DatasetError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Self::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
