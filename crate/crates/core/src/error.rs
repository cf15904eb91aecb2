use thiserror::Error;

/// Errors produced anywhere in the coding pipeline.
#[derive(Debug, Error)]
pub enum GmtcError {
    #[error("matrix is not Hermitian (max asymmetry {asymmetry:e}, tolerance {tolerance:e})")]
    NonHermitianInput { asymmetry: f64, tolerance: f64 },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("dimension {dim} exceeds the configured maximum {max}")]
    DimensionOverflow { dim: usize, max: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("mixture fit degenerated: {0}")]
    DegenerateFit(String),

    #[error("infeasible rate/distortion target: {0}")]
    InfeasibleTarget(String),

    #[error("symbol {symbol} outside model support [{low}, {high}]")]
    SymbolOutOfSupport { symbol: i64, low: i64, high: i64 },

    #[error("corrupt stream: {0}")]
    CorruptStream(String),

    #[error("rate allocation was not computed from this dictionary")]
    AllocationMismatch,

    #[error("dictionary hash mismatch: stream expects {expected:016x}, dictionary is {actual:016x}")]
    DictionaryMismatch { expected: u64, actual: u64 },

    #[error("block size {block} does not divide vector length {len}")]
    IndivisibleBlock { len: usize, block: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invariant violated: {0}")]
    InvariantViolation(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GmtcError>;
