use std::path::PathBuf;
use std::process::ExitCode;

use rqa_core::Error as CoreError;
use rqa_service::ServiceError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error("{0}")]
    Usage(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    /// 3 invalid input or configuration, 4 checkpoint problems, 5 split
    /// mismatch, 6 unusable data, 7 training diverged, 8 filesystem or
    /// JSON, 9 service failure, 1 anything else. clap uses 2 for bad
    /// arguments.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 3,
            CliError::Core(e) => core_code(e),
            CliError::Service(ServiceError::Core(e)) => core_code(e),
            CliError::Service(ServiceError::Config(_)) => 3,
            CliError::Service(_) => 9,
            CliError::Io { .. } | CliError::Json(_) => 8,
        }
    }
}

fn core_code(e: &CoreError) -> u8 {
    use CoreError::*;
    match e {
        Config(_) | BadRatios(_) | InvalidDistribution(_) | UnknownRating(_) | WrongMode { .. } => 3,
        MissingCheckpoint(_) | Checkpoint(_) => 4,
        SplitMismatch(_) => 5,
        MalformedRecord { .. }
        | DanglingGoldId(_)
        | DuplicateId(_)
        | EmptyText
        | EmptySequence
        | NoCandidates
        | UnknownDomain(_)
        | UnknownPassage(_)
        | EmptyGroup
        | DomainTooSmall(_)
        | MisalignedSystems(_)
        | RaterCount { .. }
        | MissingGold(_)
        | TooFewItems(_)
        | EmptyDataset
        | DimensionMismatch { .. } => 6,
        NonFiniteLoss { .. } => 7,
        Io { .. } | Json(_) => 8,
        Tensor(_) => 1,
    }
}

impl From<CliError> for ExitCode {
    fn from(e: CliError) -> Self {
        ExitCode::from(e.exit_code())
    }
}
