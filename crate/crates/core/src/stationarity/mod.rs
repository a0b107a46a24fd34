//! Augmented Dickey-Fuller unit-root test and its least-squares solver.

mod adf;
mod ols;

pub use adf::{adf_fixed_lag, adf_test, default_max_lags, mackinnon_p, AdfResult};
pub use ols::{ols, OlsFit};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum StationarityError {
    #[error("sample too small: need at least {needed} observations, got {got}")]
    SampleSize { needed: usize, got: usize },
    #[error("degenerate regression: {0}")]
    Degenerate(String),
    #[error("design matrix is rank deficient")]
    Singular,
    #[error("dimension error: {0}")]
    Dimension(String),
}

pub type Result<T, E = StationarityError> = std::result::Result<T, E>;
