//! Crate-wide error type.
//!
//! Every fallible operation in this crate returns [`Result`]. Variants are
//! grouped by the stage that raises them; messages carry enough context to
//! diagnose a failure without a backtrace.

use thiserror::Error;

/// Alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A vector with (near-)zero Euclidean norm cannot be normalized.
    #[error("cannot l2-normalize a vector with norm {norm:.3e} (index {index})")]
    ZeroVector { index: usize, norm: f64 },

    /// An operation required unit-norm columns but got something else.
    #[error("column {index} has norm {norm}, expected unit norm within {tolerance:.1e}")]
    NonNormalized {
        index: usize,
        norm: f64,
        tolerance: f64,
    },

    /// Two operands disagree on vector dimensionality.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// An operation received no data.
    #[error("empty input: {context}")]
    EmptyInput { context: &'static str },

    /// Mixing coefficient concentration must be positive and finite.
    #[error("mixup concentration alpha must be positive and finite, got {0}")]
    InvalidAlpha(f64),

    /// Mixing requires at least two samples to draw distinct partners.
    #[error("batch of {0} is too small to mix, need at least 2 samples")]
    BatchTooSmall(usize),

    /// Mixing coefficient must lie in [0, 1].
    #[error("mixing coefficient lambda must lie in [0, 1], got {0}")]
    InvalidLambda(f64),

    /// A sample may not be its own mixing partner.
    #[error("sample {0} is assigned itself as mixing partner")]
    SelfPartner(usize),

    /// Similarity threshold must lie in [-1, 1].
    #[error("similarity threshold tau must lie in [-1, 1], got {0}")]
    InvalidTau(f64),

    /// Pooling power must be finite and nonzero.
    #[error("pooling power must be finite and nonzero, got {0}")]
    InvalidPower(f64),

    /// Index referenced outside the valid range.
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    /// A sample listed itself as its own positive.
    #[error("sample {0} lists itself as a positive")]
    SelfPair(usize),

    /// Positive sets fed to the label matrix must already be symmetric.
    #[error("positive sets are not symmetric: {query} lists {other} but not vice versa")]
    AsymmetricInput { query: usize, other: usize },

    /// Two containers that must be index-aligned have different lengths.
    #[error("length mismatch: {left} vs {right} ({context})")]
    LengthMismatch {
        left: usize,
        right: usize,
        context: &'static str,
    },

    /// Histogram binning needs at least two bin centers.
    #[error("quantized AP needs at least 2 bins, got {0}")]
    InvalidBins(usize),

    /// Relevance labels must be exactly 0 or 1.
    #[error("label at index {index} is {value}, expected 0 or 1")]
    NonBinaryLabel { index: usize, value: f64 },

    /// Every query row had an empty positive set; the loss is undefined.
    #[error("all queries have empty positive sets; loss is undefined")]
    AllQueriesEmpty,

    /// Backward pass was invoked with a cache that does not match its inputs.
    #[error("backward cache does not match inputs: {context}")]
    MissingCache { context: &'static str },

    /// A gradient or parameter update produced a non-finite value.
    #[error("non-finite value in {context}")]
    NonFinite { context: &'static str },

    /// Tensor shapes disagree (optimizer state, snapshots, checkpoints).
    #[error("shape mismatch: {context}")]
    ShapeMismatch { context: String },

    /// Retrieval evaluation needs at least one query with relevant items.
    #[error("no query has any relevant database item")]
    NoQueries,

    /// Whitening asked for more components than the data supports.
    #[error("covariance rank {available} cannot support {requested} whitening components")]
    RankDeficient { available: usize, requested: usize },

    /// Synthetic world constraints could not be satisfied.
    #[error("world generation infeasible: {0}")]
    InfeasibleSpec(String),

    /// World parameters rejected before any sampling.
    #[error("invalid world spec: {0}")]
    InvalidWorldSpec(String),

    /// Run configuration rejected; every violation is listed.
    #[error("invalid configuration:\n{0}")]
    InvalidConfig(String),

    /// File did not start with the expected magic bytes.
    #[error("bad magic in {path}: expected {expected:?}, got {got:?}")]
    BadMagic {
        path: String,
        expected: [u8; 4],
        got: [u8; 4],
    },

    /// File version not understood by this build.
    #[error("unsupported format version {got} in {path} (supported: {supported})")]
    UnsupportedVersion {
        path: String,
        got: u32,
        supported: u32,
    },

    /// Payload ended before the header-declared element count.
    #[error("truncated payload in {path}: header declares {expected} values, found {got}")]
    TruncatedPayload {
        path: String,
        expected: usize,
        got: usize,
    },

    /// A text record (ground truth, splits) failed to parse.
    #[error("malformed record at {path}:{line}: {reason}")]
    MalformedRecord {
        path: String,
        line: usize,
        reason: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
