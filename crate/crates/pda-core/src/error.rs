use thiserror::Error;

/// Errors surfaced by every module in this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes; names both offenders.
    #[error("dimension mismatch in {context}: left {left:?} vs right {right:?}")]
    Dim {
        context: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// A scalar parameter is out of its documented range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Input that would make the operation mathematically meaningless
    /// (zero rows under normalization, single-class distance stats, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A caller broke an API contract (non-scalar loss, non-normalized
    /// features, probability rows that do not sum to one).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Bad user data: unknown class ids, mismatched lengths, missing files.
    #[error("data error: {0}")]
    Data(String),

    /// Malformed binary container; `offset` is the byte where parsing failed.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// Feature-bank construction found classes with zero candidate samples.
    #[error("feature bank construction failed, classes without candidates: {0:?}")]
    EmptyClasses(Vec<usize>),

    /// The function under finite-difference checking is not deterministic.
    #[error("non-deterministic function under gradient check: {0}")]
    Determinism(String),

    /// NaN/Inf or other numerical breakdown.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
