use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("session {session_id}: {message}")]
    Validation { session_id: String, message: String },

    #[error("session has no clicked result")]
    NoClicks,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("no pairwise judgments could be formed from the log")]
    EmptyLog,

    #[error("no holdout session has both a clicked and a non-clicked result")]
    EmptyTestSet,

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },

    #[error("unsupported model format: {0}")]
    Version(String),

    #[error("model file truncated: {0}")]
    Truncated(String),

    #[error("train and holdout sessions overlap on {count} session ids (first: {first})")]
    Overlap { count: usize, first: String },
}

impl Error {
    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }
}
