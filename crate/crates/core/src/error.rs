use thiserror::Error;

/// Errors raised anywhere in the lab.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("unsupported primitive `{0}`")]
    UnsupportedOp(String),

    #[error("primitive {op} expects {expected} inputs, got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("loss must be a scalar of shape [1], got {0:?}")]
    NotScalar(Vec<usize>),

    #[error("value was not produced on this tape")]
    NotOnTape,

    #[error("parameter key mismatch: {0}")]
    KeyMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag, used for the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::UnsupportedOp(_) => "unsupported_op",
            Error::Arity { .. } => "arity",
            Error::NotScalar(_) => "not_scalar",
            Error::NotOnTape => "not_on_tape",
            Error::KeyMismatch(_) => "key_mismatch",
            Error::NonFinite(_) => "non_finite",
            Error::Config(_) => "config",
            Error::Invalid(_) => "invalid",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
