use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic in {path}: expected {expected:?}, found {found:?}")]
    BadMagic {
        path: PathBuf,
        expected: [u8; 4],
        found: [u8; 4],
    },
    #[error("truncated payload in {path}: expected {expected} bytes, found {found}")]
    TruncatedPayload {
        path: PathBuf,
        expected: u64,
        found: u64,
    },
    #[error("non-finite value at row {row}, column {col}")]
    NonFiniteValue { row: usize, col: usize },
    #[error("row {0} has zero norm")]
    ZeroRow(usize),
    #[error("adapter output row {0} is degenerate (zero norm)")]
    DegenerateOutputRow(usize),
    #[error("perturbed row {0} is degenerate (all surviving coordinates are zero)")]
    DegenerateRow(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),
    #[error("balance factor must lie in (0, 1), got {0}")]
    InvalidLambda(f64),
    #[error("target row {0} has no finite entry")]
    EmptyRow(usize),
    #[error("memory bank is empty")]
    BankEmpty,
    #[error("index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("loss term {0} is not finite")]
    NonFiniteTerm(&'static str),
    #[error("query {0} has no relevant gallery item")]
    NoRelevant(usize),
    #[error("no cross-modal pairs were mined besides the given ones")]
    NothingMined,
    #[error("checkpoint error: {0}")]
    MissingCheckpoint(String),
    #[error("manifest error: {0}")]
    Manifest(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
