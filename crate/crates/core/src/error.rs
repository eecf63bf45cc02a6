use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm {norm:e} is below the normalization threshold")]
    ZeroVector { norm: f64 },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("embedding dimension must be at least 2, got {0}")]
    DimensionTooSmall(usize),
    #[error("non-finite value at coordinate {0}")]
    NonFinite(usize),
    #[error("class id {id} outside 1..={classes}")]
    InvalidClass { id: usize, classes: usize },

    #[error("bad magic bytes {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported store version {0}")]
    UnsupportedVersion(u16),
    #[error("unsupported store flags {0:#06x}")]
    UnsupportedFlags(u16),
    #[error("file truncated: needed {needed} bytes, {available} available")]
    TruncatedFile { needed: usize, available: usize },
    #[error("{0} trailing bytes after store payload")]
    TrailingBytes(usize),
    #[error("row {row} has norm {norm}, not unit within 1e-6")]
    NormViolation { row: usize, norm: f64 },
    #[error("malformed cache header: {0}")]
    BadHeader(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("retrieval budget {k} exceeds database size {n}")]
    BudgetExceedsDatabase { k: usize, n: usize },
    #[error("class {0} has no queries")]
    EmptyQueryClass(usize),

    #[error("ensemble expects (ZOC, RET) logits, got ({0}, {1})")]
    HeadMismatch(&'static str, &'static str),
    #[error("weights must sum to 1, got {0}")]
    WeightSumViolation(f64),
    #[error("sample set is empty")]
    EmptySampleSet,
    #[error("non-finite gradient at step {0}")]
    NonFiniteGradient(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("{classes} classes cannot be placed exactly in dimension {dim}")]
    TooManyClasses { classes: usize, dim: usize },
    #[error("separation {nu} unreachable for {classes} classes (max {max})")]
    UnreachableSeparation { nu: f64, classes: usize, max: f64 },
    #[error("gave up placing a separated cluster center after {0} rejections")]
    RejectionLimit(usize),

    #[error("threshold {0} is negative and excludes the anchor class")]
    NegativeThreshold(f64),
    #[error("assumption violated: {0}")]
    AssumptionViolated(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("output directory {0} already exists and is not empty")]
    OutputExists(PathBuf),
    #[error("malformed result file {path}: {msg}")]
    BadResultFile { path: PathBuf, msg: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
