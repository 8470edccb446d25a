use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("row {row}: {detail}")]
    Parse { row: usize, detail: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("split {0} is empty")]
    EmptySplit(String),

    #[error("batch normalization in training mode needs a batch of at least 2, got {0}")]
    DegenerateBatch(usize),

    #[error("batchnorm_backward needs a cache from a training-mode forward pass")]
    EvalModeCache,

    #[error("stale sample: variational parameters changed since the last sample_weights call")]
    StaleSample,

    #[error("training diverged at step {step} in {context}: max |grad| = {max_grad}")]
    Diverged {
        step: u64,
        context: String,
        max_grad: f64,
    },

    #[error("model has no variational layers")]
    NoVariationalLayers,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}
