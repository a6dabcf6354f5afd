use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty attention row")]
    EmptyAttentionRow,

    #[error("non-finite objective")]
    NonFiniteObjective,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("pad first: grid {height}x{width} is not divisible by k={k}")]
    PadFirst { height: usize, width: usize, k: usize },

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error("nothing to reconstruct")]
    NothingToReconstruct,

    #[error("empty summary sequence")]
    EmptySummarySequence,

    #[error("empty region")]
    EmptyRegion,

    #[error("non-finite activation in layer {layer}")]
    NonFiniteActivation { layer: usize },

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Running out of input mid-record is a malformed file, not an I/O failure.
pub(crate) fn eof_as_truncation(err: Error) -> Error {
    match err {
        Error::Io(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Error::Format("input is truncated".into()),
        other => other,
    }
}
