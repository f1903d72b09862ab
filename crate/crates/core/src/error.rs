use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape for {op}: {detail}")]
    InvalidShape { op: &'static str, detail: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{field} id {id} out of range (vocabulary size {vocab})")]
    IdOutOfRange {
        field: String,
        id: usize,
        vocab: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("line {line}: {message}")]
    Ingest { line: usize, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite value at {location}")]
    NonFinite { location: String },

    #[error("non-finite loss at step {step}; parameter norms: {norms}")]
    Diverged { step: usize, norms: String },

    #[error("unknown parameter path `{0}`")]
    UnknownParam(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
