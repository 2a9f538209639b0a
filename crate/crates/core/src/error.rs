use thiserror::Error;

/// Errors produced anywhere in the detection pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum PdpError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("cosine similarity undefined for a zero-norm vector")]
    ZeroNorm,

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("prompt length {0} is odd; prefix split requires an even length")]
    OddPromptLength(usize),

    #[error("task {0} already has a private slab")]
    DuplicateTask(usize),

    #[error("cannot match {rows} targets against only {cols} predictions")]
    TooManyTargets { rows: usize, cols: usize },

    #[error("invalid distribution: {0}")]
    NotADistribution(String),

    #[error("class {0} prototype is frozen")]
    FrozenPrototype(usize),

    #[error("class {0} is not part of the current task")]
    ForeignClass(usize),

    #[error("pseudo-label class {0} overlaps the current task's real labels")]
    ClassOverlap(usize),

    #[error("stage {requested} requested but stage {expected} is next")]
    StageOrder { requested: usize, expected: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for PdpError {
    fn from(e: std::io::Error) -> Self {
        PdpError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, PdpError>;
