use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("index {index} out of range (len {len})")]
    Index { index: usize, len: usize },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("template error at column {column}: {message}")]
    Template { column: usize, message: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error("unknown token `{0}`")]
    UnknownToken(String),
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
