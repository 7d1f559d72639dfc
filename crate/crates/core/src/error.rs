use thiserror::Error;

/// Errors raised by tensor math, model construction and the experiment pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("zero-norm nested value in layer {layer}, row {row}")]
    ZeroNormValue { layer: usize, row: usize },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("unknown word {0:?}")]
    UnknownWord(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("image format error: {0}")]
    Image(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
