use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the numeric core, the model and the training loop.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    Shape { shape: Vec<usize>, reason: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward called twice on the same tape without reset")]
    BackwardTwice,
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("loss does not depend on any tensor that requires grad")]
    Detached,
    #[error("attention row {row} has no allowed key")]
    FullyMasked { row: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("unknown token id {0}")]
    UnknownTokenId(u32),
    #[error("position {position} exceeds maximum text length {max}")]
    SequenceTooLong { position: usize, max: usize },
    #[error("every target position is padding")]
    AllPadded,
    #[error("missing parameter {0}")]
    MissingParameter(String),
    #[error("corpus error: {0}")]
    Corpus(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
