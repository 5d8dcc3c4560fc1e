use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("line {line}: missing field {field}")]
    MissingField { line: usize, field: &'static str },

    #[error("line {line}: malformed record: {msg}")]
    MalformedRecord { line: usize, msg: String },

    #[error("duplicate document id {0:?}")]
    DuplicateId(String),

    #[error("document {id:?}: {reason}")]
    InvalidDocument { id: String, reason: String },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("corpus too small: need {required} documents, have {available}")]
    CorpusTooSmall { required: usize, available: usize },

    #[error("empty document pool")]
    EmptyPool,

    #[error("unknown token id {0}")]
    UnknownTokenId(usize),

    #[error("test article exceeds token budget")]
    PromptBudgetExceeded,

    #[error("document {id:?}: encoded length {len} exceeds context window {ctx}")]
    DocumentTooLong { id: String, len: usize, ctx: usize },

    #[error("sequence length {len} exceeds context window {ctx}")]
    SequenceTooLong { len: usize, ctx: usize },

    #[error("unknown tensor {0:?}")]
    UnknownTensor(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{0}")]
    Invalid(String),
}
