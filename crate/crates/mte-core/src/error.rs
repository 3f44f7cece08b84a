use thiserror::Error;

/// Errors produced by estimation and inference routines.
///
/// The coarse variants map onto CLI exit codes: configuration problems,
/// data/overlap problems, and numerical failures are distinguished so
/// callers can react differently (e.g. a pipeline may retry a numerical
/// failure with different settings but must fix its data on overlap errors).
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: inconsistent dimensions, bad option values.
    #[error("config: {0}")]
    Config(String),

    /// Malformed input data (parse failures, bad column values).
    #[error("data: {0}")]
    Data(String),

    /// A treatment indicator other than 0 or 1.
    #[error("invalid treatment value {found:?} in row {row}")]
    InvalidTreatment { found: String, row: usize },

    /// An empty (d, z) cell or a degenerate propensity score: every
    /// instrument level must contain both treated and untreated units.
    #[error("overlap violated at (d={d}, z={z})")]
    Overlap { d: u8, z: String },

    /// Numerical failure (singular covariance, optimizer breakdown, ...).
    #[error("numerical: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;
