use statrs::function::erf::erfc;

use super::{ols, Result, StationarityError};
use crate::scalar::Scalar;

/// Minimum number of regression rows after lag trimming.
const MIN_ROWS: usize = 15;

/// Outcome of an ADF test with a constant and no trend.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdfResult<T> {
    /// t-ratio of the lagged-level coefficient.
    pub statistic: T,
    pub p_value: f64,
    pub lags_used: usize,
    /// Rows in the final regression.
    pub n_obs: usize,
}

impl<T: Scalar> AdfResult<T> {
    /// Whether the unit root is rejected at `alpha`.
    pub fn rejects_at(&self, alpha: f64) -> bool {
        self.p_value <= alpha
    }
}

/// Schwert upper bound `⌊12 (n/100)^{1/4}⌋`, capped so at least half the
/// sample, and never fewer than the minimum regression rows, remains.
pub fn default_max_lags(n: usize) -> usize {
    let schwert = (12.0 * (n as f64 / 100.0).powf(0.25)).floor() as usize;
    schwert
        .min((n / 2).saturating_sub(2))
        .min(n.saturating_sub(1 + MIN_ROWS))
}

// MacKinnon (1994) response-surface coefficients for the constant-only
// regression with one series (N = 1), as tabulated in statsmodels' adfvalues.
const TAU_MAX: f64 = 2.74;
const TAU_MIN: f64 = -18.83;
const TAU_STAR: f64 = -1.61;
const TAU_SMALLP: [f64; 3] = [2.1659, 1.4412, 0.038269];
const TAU_LARGEP: [f64; 4] = [1.7339, 0.93202, -0.12745, -0.010368];

/// Approximate asymptotic p-value of an ADF t-statistic.
pub fn mackinnon_p(stat: f64) -> f64 {
    if stat.is_nan() {
        return f64::NAN;
    }
    if stat > TAU_MAX {
        return 1.0;
    }
    if stat < TAU_MIN {
        return 0.0;
    }
    let coef: &[f64] = if stat <= TAU_STAR {
        &TAU_SMALLP
    } else {
        &TAU_LARGEP
    };
    let z = coef.iter().rev().fold(0.0, |acc, &c| acc * stat + c);
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Rows of the ADF regression `Δx_t = c + γ x_{t-1} + Σ φ_i Δx_{t-i}`
/// using `lags` lagged differences, starting at difference index `start`.
fn design<T: Scalar>(x: &[T], dx: &[T], lags: usize, start: usize) -> (Vec<T>, Vec<T>, usize) {
    let k = 2 + lags;
    let rows = dx.len() - start;
    let mut xm = Vec::with_capacity(rows * k);
    let mut y = Vec::with_capacity(rows);
    for t in start..dx.len() {
        xm.push(T::one());
        xm.push(x[t]);
        for i in 1..=lags {
            xm.push(dx[t - i]);
        }
        y.push(dx[t]);
    }
    (xm, y, k)
}

fn validate<T: Scalar>(x: &[T]) -> Result<Vec<T>> {
    if x.len() < MIN_ROWS + 2 {
        return Err(StationarityError::SampleSize {
            needed: MIN_ROWS + 2,
            got: x.len(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(StationarityError::Degenerate(
            "non-finite value in series".into(),
        ));
    }
    let (lo, hi) = x
        .iter()
        .fold((x[0], x[0]), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if lo == hi {
        return Err(StationarityError::Degenerate("series is constant".into()));
    }
    Ok(x.windows(2).map(|w| w[1] - w[0]).collect())
}

fn fit<T: Scalar>(x: &[T], dx: &[T], lags: usize) -> Result<AdfResult<T>> {
    if dx.len() < lags + MIN_ROWS {
        return Err(StationarityError::SampleSize {
            needed: lags + MIN_ROWS + 1,
            got: x.len(),
        });
    }
    let (xm, y, k) = design(x, dx, lags, lags);
    let n = y.len();
    let f = ols(&xm, n, k, &y).map_err(|e| match e {
        StationarityError::Singular => {
            StationarityError::Degenerate("singular ADF regression".into())
        }
        e => e,
    })?;
    if f.std_errors[1] == T::zero() {
        return Err(StationarityError::Degenerate(
            "zero residual variance".into(),
        ));
    }
    let statistic = f.coefficients[1] / f.std_errors[1];
    Ok(AdfResult {
        statistic,
        p_value: mackinnon_p(statistic.as_f64()),
        lags_used: lags,
        n_obs: n,
    })
}

/// ADF test with a fixed number of lagged differences.
pub fn adf_fixed_lag<T: Scalar>(x: &[T], lags: usize) -> Result<AdfResult<T>> {
    let dx = validate(x)?;
    fit(x, &dx, lags)
}

/// ADF test with AIC lag selection.
///
/// Every candidate lag order `0..=max_lags` is fitted on the common sample
/// left after trimming `max_lags` differences; the minimum-AIC order (smallest
/// order on ties) is then refitted on its full available sample.
/// `max_lags` defaults to [`default_max_lags`].
pub fn adf_test<T: Scalar>(x: &[T], max_lags: Option<usize>) -> Result<AdfResult<T>> {
    let dx = validate(x)?;
    let max_lags = match max_lags {
        Some(p) => p,
        None => default_max_lags(x.len()),
    };
    if dx.len() < max_lags + MIN_ROWS {
        return Err(StationarityError::SampleSize {
            needed: max_lags + MIN_ROWS + 1,
            got: x.len(),
        });
    }
    let mut best: Option<(T, usize)> = None;
    for lags in 0..=max_lags {
        let (xm, y, k) = design(x, &dx, lags, max_lags);
        let f = match ols(&xm, y.len(), k, &y) {
            Ok(f) => f,
            Err(StationarityError::Singular) => continue,
            Err(e) => return Err(e),
        };
        if best.is_none_or(|(aic, _)| f.aic < aic) {
            best = Some((f.aic, lags));
        }
    }
    let (_, lags) =
        best.ok_or_else(|| StationarityError::Degenerate("every lag order singular".into()))?;
    fit(x, &dx, lags)
}
