use thiserror::Error;

/// Error type shared by the whole crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: usize, vocab_size: usize },
    #[error("no parameter registered under path `{path}`")]
    UnknownParam { path: String },
    #[error("non-finite loss ({value}) at step {step}; aborting training")]
    NonFiniteLoss { value: f64, step: u64 },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("batch contains only padding; loss is undefined")]
    AllPadBatch,
    #[error("sequence of length {len} exceeds limit {limit}")]
    SequenceTooLong { len: usize, limit: usize },
    #[error("unknown config key `{key}`")]
    UnknownConfigKey { key: String },
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("invalid argument: {0}")]
    InvalidArg(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
