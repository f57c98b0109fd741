use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed record on line {line}: {message}")]
    MalformedRecord { line: usize, message: String },

    #[error("question {0} references a gold passage that does not exist in its domain")]
    DanglingGoldId(String),

    #[error("duplicate id {0}")]
    DuplicateId(String),

    #[error("split ratios must be non-negative and sum to 1, got {0:?}")]
    BadRatios([f64; 3]),

    #[error("text is empty after tokenization")]
    EmptyText,

    #[error("token sequence is empty")]
    EmptySequence,

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("no candidates to score")]
    NoCandidates,

    #[error("unknown domain {0}")]
    UnknownDomain(String),

    #[error("non-finite loss {loss} at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize, loss: f64 },

    #[error("rating group is empty")]
    EmptyGroup,

    #[error("invalid rating distribution: {0}")]
    InvalidDistribution(String),

    #[error("unknown rating label {0:?}")]
    UnknownRating(String),

    #[error("unknown passage {0:?}")]
    UnknownPassage(String),

    #[error("domain {0} has too few passages to sample negatives")]
    DomainTooSmall(String),

    #[error("systems are not aligned on the same questions: {0}")]
    MisalignedSystems(String),

    #[error("expected {expected} judgments for item {item}, got {actual}")]
    RaterCount {
        item: String,
        expected: usize,
        actual: usize,
    },

    #[error("missing gold label for item {0}")]
    MissingGold(String),

    #[error("not enough items: {0}")]
    TooFewItems(usize),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("operation requires {expected} mode")]
    WrongMode { expected: &'static str },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing checkpoint at {0}")]
    MissingCheckpoint(PathBuf),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint was trained on {0} test questions")]
    SplitMismatch(usize),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
