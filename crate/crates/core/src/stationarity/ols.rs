use super::{Result, StationarityError};
use crate::scalar::Scalar;

/// Ordinary least squares fit.
#[derive(Debug, Clone, PartialEq)]
pub struct OlsFit<T> {
    pub coefficients: Vec<T>,
    pub std_errors: Vec<T>,
    pub rss: T,
    /// `n ln(RSS / n) + 2k`; same ranking as the Gaussian log-likelihood AIC.
    pub aic: T,
    pub n: usize,
    pub k: usize,
}

/// Least squares of `y` on the columns of the row-major `n × k` design `x`,
/// solved by Householder QR.
pub fn ols<T: Scalar>(x: &[T], n: usize, k: usize, y: &[T]) -> Result<OlsFit<T>> {
    if x.len() != n * k || y.len() != n {
        return Err(StationarityError::Dimension(format!(
            "design {} values for {n}x{k}, response {}",
            x.len(),
            y.len()
        )));
    }
    if n <= k {
        return Err(StationarityError::SampleSize {
            needed: k + 1,
            got: n,
        });
    }

    // Column-major working copy; after the loop its upper triangle is R.
    let mut a: Vec<Vec<T>> = (0..k)
        .map(|j| (0..n).map(|i| x[i * k + j]).collect())
        .collect();
    let mut qty = y.to_vec();
    let mut r_diag = vec![T::zero(); k];
    for j in 0..k {
        let norm = a[j][j..].iter().map(|&v| v * v).sum::<T>().sqrt();
        if norm == T::zero() {
            return Err(StationarityError::Singular);
        }
        let alpha = if a[j][j] > T::zero() { -norm } else { norm };
        let mut v: Vec<T> = a[j][j..].to_vec();
        v[0] = v[0] - alpha;
        let vnorm2: T = v.iter().map(|&e| e * e).sum();
        r_diag[j] = alpha;
        if vnorm2 == T::zero() {
            continue;
        }
        let two = T::lit(2.0);
        for col in a.iter_mut().skip(j + 1) {
            let dot: T = v.iter().zip(&col[j..]).map(|(&p, &q)| p * q).sum();
            let f = two * dot / vnorm2;
            for (c, &p) in col[j..].iter_mut().zip(&v) {
                *c = *c - f * p;
            }
        }
        let dot: T = v.iter().zip(&qty[j..]).map(|(&p, &q)| p * q).sum();
        let f = two * dot / vnorm2;
        for (c, &p) in qty[j..].iter_mut().zip(&v) {
            *c = *c - f * p;
        }
        a[j][j] = alpha;
    }

    let scale = r_diag.iter().fold(T::zero(), |m, &d| m.max(d.abs()));
    let tol = scale * T::lit(1e-10);
    if r_diag.iter().any(|d| d.abs() <= tol) {
        return Err(StationarityError::Singular);
    }
    let r = |i: usize, j: usize| if i == j { r_diag[i] } else { a[j][i] };

    // Back-substitution R β = (Qᵀy)[..k].
    let mut beta = vec![T::zero(); k];
    for i in (0..k).rev() {
        let mut s = qty[i];
        for (j, b) in beta.iter().enumerate().skip(i + 1) {
            s = s - r(i, j) * *b;
        }
        beta[i] = s / r(i, i);
    }

    // Residuals computed directly from the fit.
    let rss: T = (0..n)
        .map(|i| {
            let fit: T = (0..k).map(|j| x[i * k + j] * beta[j]).sum();
            let e = y[i] - fit;
            e * e
        })
        .sum();

    // (XᵀX)⁻¹ = R⁻¹ R⁻ᵀ; only its diagonal is needed.
    let mut rinv = vec![T::zero(); k * k];
    for c in 0..k {
        for i in (0..=c).rev() {
            let mut s = if i == c { T::one() } else { T::zero() };
            for j in i + 1..=c {
                s = s - r(i, j) * rinv[j * k + c];
            }
            rinv[i * k + c] = s / r(i, i);
        }
    }
    let sigma2 = rss / T::lit((n - k) as f64);
    let std_errors = (0..k)
        .map(|j| {
            let d: T = (j..k).map(|c| rinv[j * k + c] * rinv[j * k + c]).sum();
            (sigma2 * d).sqrt()
        })
        .collect();
    let nf = T::lit(n as f64);
    let aic = nf * (rss / nf).ln() + T::lit(2.0 * k as f64);
    Ok(OlsFit {
        coefficients: beta,
        std_errors,
        rss,
        aic,
        n,
        k,
    })
}
