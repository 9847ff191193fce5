use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("duplicate entity id `{0}`")]
    DuplicateEntity(String),

    #[error("entity `{0}` is not in the knowledge base")]
    UnknownEntity(String),

    #[error("invalid mention span {start}..{end} in text of {len} characters")]
    InvalidSpan { start: usize, end: usize, len: usize },

    #[error("mention surface `{surface}` does not match text at {start}..{end}")]
    SurfaceMismatch { surface: String, start: usize, end: usize },

    #[error("overlapping or unordered mention spans at {0}..{1}")]
    OverlappingSpans(usize, usize),

    #[error("query and option need {needed} tokens but the maximum sequence length is {max}")]
    SequenceOverflow { needed: usize, max: usize },

    #[error("token id {id} is outside the vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },

    #[error("sequence of length {len} exceeds the encoder maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("encoder tape does not belong to the current parameters")]
    StaleTape,

    #[error("non-finite gradient in `{0}`")]
    NonFiniteGradient(String),

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("input format error: {0}")]
    Format(String),

    #[error("model/config mismatch: {0}")]
    ModelMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 for malformed input, 3 for model/config mismatch.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ModelMismatch(_) | Error::InvalidConfig(_) | Error::Unsupported(_) => 3,
            Error::Io(_) => 1,
            _ => 2,
        }
    }
}
