use thiserror::Error;

/// Errors surfaced by the library. Variants are grouped so the CLI can map
/// them onto distinct exit codes (usage/config, data, numerical).
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown task id: {0}")]
    UnknownTask(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("malformed data: {0}")]
    Data(String),

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(context: impl Into<String>, expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
