//! Error type shared by estimation, testing, and simulation routines.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, FarmError>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FarmError {
    /// More factors requested than the data can support.
    #[error("requested {requested} factors but the numerical rank is {rank}")]
    RankDeficient { requested: usize, rank: usize },

    /// The covariance spectrum carries no usable signal.
    #[error("degenerate spectrum: all eigenvalues below {threshold:e}")]
    DegenerateSpectrum { threshold: f64 },

    /// An iterative solver exhausted its iteration budget.
    #[error("solver stopped after {iterations} iterations with optimality gap {gap:e}")]
    NonConvergence { gap: f64, iterations: usize },

    /// A design column has (numerically) zero variance where positive
    /// variance is required.
    #[error("column {index} is numerically degenerate")]
    DegenerateColumn { index: usize },

    /// Refitted-variance support selection left too few rows for a refit.
    #[error("selected support of size {support} is too large for a refit on {half} rows")]
    SupportTooLarge { support: usize, half: usize },

    /// Sample-split exponent leaves no usable second stage.
    #[error("split exponent {exponent} leaves no second-stage rows for n = {n}")]
    ExponentTooLarge { exponent: f64, n: usize },

    /// Moving-window evaluation needs a minimum window length.
    #[error("window of {window} rows is below the minimum of {min}")]
    WindowTooSmall { window: usize, min: usize },

    /// Not enough rows for the requested operation.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// A precondition on the arguments failed.
    #[error("invalid input: {0}")]
    InvalidInput(String),
}
