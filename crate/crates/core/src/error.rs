use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("dimension mismatch: expected {expected} features, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid alpha {0}: must lie in (0, 1)")]
    InvalidAlpha(f64),

    #[error("invalid probability {0}: must lie in (0, 1)")]
    InvalidProbability(f64),

    #[error("invalid distribution parameters: {0}")]
    InvalidParameters(String),

    #[error("{0} has no quantile function")]
    NoQuantile(&'static str),

    #[error("grid must be sorted ascending (violated at index {0})")]
    UnsortedGrid(usize),

    #[error("response must be positive for a gamma fit (row {row}: {value})")]
    NonPositiveResponse { row: usize, value: f64 },

    #[error("need more observations than parameters: n = {n}, parameters = {params}")]
    TooFewObservations { n: usize, params: usize },

    #[error("weighted least-squares system is singular")]
    Singular,

    #[error("fit did not converge")]
    NotConverged,

    #[error("bootstrap size {0} is below the minimum of 100")]
    BootstrapTooSmall(usize),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("missing column `{0}` in header")]
    MissingColumn(String),

    #[error("row {row}, column `{column}`: {message}")]
    Cell {
        row: usize,
        column: String,
        message: String,
    },

    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;
