use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("softmax over an empty axis")]
    EmptyAxis,
    #[error("invalid permutation {0:?} for rank {1}")]
    InvalidPermutation(Vec<usize>, usize),
    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("backward requires a scalar loss, got {0} elements")]
    NotScalar(usize),
    #[error("tensor is not recorded on this tape")]
    DetachedGraph,
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("operation would produce an empty output: {0}")]
    EmptyOutput(String),
    #[error("invalid dropout probability {0}")]
    InvalidProbability(f64),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("head count {heads} does not divide width {width}")]
    HeadMismatch { heads: usize, width: usize },
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("invalid world spec: {0}")]
    InvalidSpec(String),
    #[error("window [{start}, {end}) outside timeline [0, {duration}]")]
    WindowOutOfRange { start: f64, end: f64, duration: f64 },
    #[error("corrupt file: {0}")]
    CorruptFile(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("training diverged at step {0}")]
    DivergenceDetected(usize),
    #[error("model has no global-average-pooling pathway")]
    NoGapPathway,
    #[error("no attention record with visual keys available")]
    NoAttentionRecord,
    #[error("checkpoint config hash {found} does not match model hash {expected}")]
    ConfigHashMismatch { expected: String, found: String },
    #[error("clip too short: {0}")]
    TooShort(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::ShapeMismatch(format!($($arg)*))
    };
}
pub(crate) use shape_err;
