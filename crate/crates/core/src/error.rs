use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("network has no hidden layer to expose")]
    NoPenultimateLayer,
    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("goal {goal:?} is unreachable from {start:?}")]
    Unreachable {
        start: (usize, usize),
        goal: (usize, usize),
    },
    #[error("task `{0}` needs a goal but none is set")]
    MissingGoal(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("batch is missing reward labels")]
    MissingRewards,
    #[error("dataset has no complete episodes")]
    NoCompleteEpisodes,
    #[error("dataset has no within-episode consecutive pairs")]
    NoEligiblePairs,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("running statistics need at least 2 samples, have {0}")]
    InsufficientStats(u64),
    #[error("reward carries no signal along the features (|z| = {0:e})")]
    DegenerateReward(f64),
    #[error("goal features coincide with the reference state features")]
    GoalIndistinct,
    #[error("missing pretrained bundle")]
    MissingBundle,

    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config value out of range for `{key}`: {msg}")]
    RangeViolation { key: String, msg: String },
    #[error("missing required config key `{0}`")]
    MissingRequired(String),
    #[error("malformed config line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("bad file format in {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors that come from a bad configuration rather than a failed run.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::UnknownKey(_)
                | Error::RangeViolation { .. }
                | Error::MissingRequired(_)
                | Error::Parse { .. }
                | Error::InvalidArgument(_)
        )
    }
}
