use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("bad magic bytes {0:?}, expected \"RMMC\"")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated file: {0}")]
    TruncatedFile(String),
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("checkpoint has no parameter groups")]
    EmptyCheckpoint,
    #[error("architecture mismatch: {0} vs {1}")]
    ArchMismatch(String, String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("invalid drop probability {0}, must lie in [0, 1)")]
    InvalidDropProb(f64),
    #[error("unknown merging operator {0:?}")]
    UnknownOperator(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("illegal action {0}")]
    IllegalAction(String),
    #[error("merge plan is empty")]
    EmptyPlan,
    #[error("dimension break between assembled layers {0} and {1}: {2}")]
    DimensionBreak(usize, usize, String),
    #[error("empty evaluation batch")]
    EmptyBatch,
    #[error("every action is masked")]
    AllMasked,
    #[error("non-finite logits")]
    NonFiniteLogits,
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error("search space of {0} plans exceeds the oracle bound of {1}")]
    SpaceTooLarge(u128, u64),
    #[error("invalid task spec: {0}")]
    InvalidSpec(String),
    #[error("training diverged at epoch {0}")]
    DivergedTraining(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
