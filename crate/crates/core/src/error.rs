//! Error type shared by every module in the crate.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    #[error("too few samples: {0}")]
    TooFewSamples(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite gradient")]
    NonFiniteGradient,

    #[error("non-finite loss")]
    NonFiniteLoss,

    #[error("non-finite reward")]
    NonFiniteReward,

    #[error("column is frozen")]
    FrozenColumn,

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("empty sample set")]
    EmptySampleSet,

    #[error("empty selection")]
    EmptySelection,

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("single class present: {0}")]
    SingleClass(String),

    #[error("degenerate pseudo-labels: candidate labeling collapsed to one class")]
    DegeneratePseudoLabels,

    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),

    #[error("data format: {0}")]
    DataFormat(String),
}

impl Error {
    /// Process exit code for the CLI: 2 config, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidSpec(_) | Error::InvalidConfig(_) => 2,
            Error::NonFiniteGradient | Error::NonFiniteLoss | Error::NonFiniteReward => 4,
            _ => 3,
        }
    }
}
