use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {dims:?}: {reason}")]
    InvalidShape { dims: Vec<usize>, reason: String },

    #[error("{op}: degenerate last axis of extent {extent}")]
    DegenerateAxis { op: &'static str, extent: usize },

    #[error("attention row {row} is fully masked")]
    FullyMaskedRow { row: usize },

    #[error("backward: {0}")]
    Backward(String),

    #[error("non-finite {which} gradient for input {input} at element {index}")]
    NonFiniteGradient {
        which: &'static str,
        input: usize,
        index: usize,
    },

    #[error("frame: {0}")]
    Frame(String),

    #[error("block origin ({x}, {y}) lies outside the {width}x{height} frame")]
    BlockOutside {
        x: usize,
        y: usize,
        width: usize,
        height: usize,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("unknown task `{0}`")]
    UnknownTask(String),

    #[error("instruction id {id} outside vocabulary of {vocab}")]
    UnknownInstruction { id: usize, vocab: usize },

    #[error("format: {0}")]
    Format(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("{failed} of {total} gradient checks failed")]
    GradCheckFailed { failed: usize, total: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn invalid_shape(dims: &[usize], reason: impl Into<String>) -> Self {
        Error::InvalidShape {
            dims: dims.to_vec(),
            reason: reason.into(),
        }
    }

    /// Process exit code for the CLI: 2 for usage/config/input problems,
    /// 3 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFiniteLoss { .. } | Error::NonFiniteGradient { .. } | Error::GradCheckFailed { .. } => 3,
            _ => 2,
        }
    }
}
