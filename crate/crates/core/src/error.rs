use thiserror::Error;

use crate::storage::checkpoint::CheckpointError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate attention row {row}: every entry is masked")]
    DegenerateAttentionRow { row: usize },

    #[error("target id {id} out of range for vocabulary of {vocab}")]
    TargetOutOfRange { id: u32, vocab: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite loss")]
    NonFiniteLoss,

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGrad(String),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("tokenizer: {0}")]
    Tokenizer(String),

    #[error("unknown token id {0}")]
    UnknownToken(u32),

    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("empty token sequence")]
    EmptySequence,

    #[error("invalid context: {0}")]
    Context(String),

    #[error("step {step} outside schedule of {total} steps")]
    StepOutOfRange { step: usize, total: usize },

    #[error("image: {0}")]
    Image(String),

    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },

    #[error("missing cross-attention trace")]
    MissingTrace,

    #[error("metrics: {0}")]
    Metrics(String),

    #[error("data: {0}")]
    Data(String),

    /// Raised by a training callback to stop the run after an epoch.
    #[error("interrupted")]
    Interrupted,

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
