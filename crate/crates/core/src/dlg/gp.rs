use std::fmt;
use std::str::FromStr;

use super::{DlgError, Result};
use crate::linalg::{cholesky, cholesky_inverse, cholesky_logdet};
use crate::ndtensor::{Graph, Tensor, Var};
use crate::scalar::Scalar;

/// Diagonal jitter added to every Gram matrix.
pub const JITTER: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Kernel {
    Rbf,
    Matern32,
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Kernel::Rbf => "rbf",
            Kernel::Matern32 => "matern32",
        })
    }
}

impl FromStr for Kernel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rbf" => Ok(Kernel::Rbf),
            "matern32" | "matern-3/2" => Ok(Kernel::Matern32),
            other => Err(format!(
                "unknown kernel `{other}` (expected rbf or matern32)"
            )),
        }
    }
}

/// Zero-mean GP prior for one group of latent dimensions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpPrior {
    pub kernel: Kernel,
    pub length_scale: f64,
}

impl GpPrior {
    pub fn new(kernel: Kernel, length_scale: f64) -> Result<Self> {
        if !(length_scale > 0.0 && length_scale.is_finite()) {
            return Err(DlgError::Parameter(format!(
                "length scale must be positive, got {length_scale}"
            )));
        }
        Ok(Self {
            kernel,
            length_scale,
        })
    }

    /// Covariance at lag `r`, without jitter.
    pub fn k(&self, r: f64) -> f64 {
        let r = r.abs();
        let l = self.length_scale;
        match self.kernel {
            Kernel::Rbf => (-(r * r) / (2.0 * l * l)).exp(),
            Kernel::Matern32 => {
                let a = 3f64.sqrt() * r / l;
                (1.0 + a) * (-a).exp()
            }
        }
    }

    /// Row-major Gram matrix over `times`, with jitter on the diagonal.
    pub fn gram<T: Scalar>(&self, times: &[f64]) -> Result<Vec<T>> {
        if times.is_empty() {
            return Err(DlgError::Parameter("empty time grid".into()));
        }
        let n = times.len();
        let mut k = vec![T::zero(); n * n];
        for i in 0..n {
            for j in 0..n {
                let mut v = self.k(times[i] - times[j]);
                if i == j {
                    v += JITTER;
                }
                k[i * n + j] = T::lit(v);
            }
        }
        Ok(k)
    }

    /// `(K⁻¹, log det K)` over `times`.
    pub fn factor<T: Scalar>(&self, times: &[f64]) -> Result<GramFactor<T>> {
        let n = times.len();
        let k = self.gram::<T>(times)?;
        let l = cholesky(&k, n)
            .ok_or_else(|| DlgError::Numerical("Gram matrix not positive definite".into()))?;
        Ok(GramFactor {
            n,
            inverse: cholesky_inverse(&l, n),
            logdet: cholesky_logdet(&l, n),
        })
    }
}

/// The eight default priors ordered kernel-major: each kernel at each scale.
pub fn prior_grid(kernels: &[Kernel], scales: &[f64]) -> Result<Vec<GpPrior>> {
    kernels
        .iter()
        .flat_map(|&k| scales.iter().map(move |&s| GpPrior::new(k, s)))
        .collect()
}

/// Prior index for each of `dims` latent dimensions: contiguous equal blocks,
/// so with 16 dimensions and 8 priors each prior owns two dimensions.
pub fn assign_dims(dims: usize, n_priors: usize) -> Vec<usize> {
    (0..dims).map(|j| j * n_priors / dims).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GramFactor<T> {
    pub n: usize,
    pub inverse: Vec<T>,
    pub logdet: T,
}

/// `KL(N(μ, diag σ²) ‖ N(0, I)) = Σ ½(σ² + μ² − 1 − log σ²)`.
pub fn kl_gaussian_diag<T: Scalar>(mu: &[T], logvar: &[T]) -> T {
    let half = T::lit(0.5);
    mu.iter()
        .zip(logvar)
        .map(|(&m, &lv)| half * (lv.exp() + m * m - T::one() - lv))
        .sum()
}

/// `KL(N(μ, diag σ²) ‖ N(0, K))` for one latent dimension over `n` points.
pub fn kl_gaussian_gp<T: Scalar>(mu: &[T], logvar: &[T], factor: &GramFactor<T>) -> Result<T> {
    let n = factor.n;
    if mu.len() != n || logvar.len() != n {
        return Err(DlgError::Parameter(format!(
            "{} means and {} variances for {n} grid points",
            mu.len(),
            logvar.len()
        )));
    }
    let kinv = &factor.inverse;
    let mut tr = T::zero();
    let mut quad = T::zero();
    for i in 0..n {
        tr = tr + kinv[i * n + i] * logvar[i].exp();
        for j in 0..n {
            quad = quad + mu[i] * kinv[i * n + j] * mu[j];
        }
    }
    let sum_lv: T = logvar.iter().copied().sum();
    Ok(T::lit(0.5) * (tr + quad - T::lit(n as f64) + factor.logdet - sum_lv))
}

/// Differentiable diagonal KL against `N(0, I)` on a graph.
pub fn kl_diag_node<T: Scalar>(g: &mut Graph<T>, mu: Var, logvar: Var) -> Result<Var> {
    let v = g.exp(logvar);
    let m2 = g.square(mu);
    let a = g.add(v, m2)?;
    let b = g.sub(a, logvar)?;
    let s = g.sum(b);
    let n = T::lit(g.value(mu).numel() as f64);
    let half = T::lit(0.5);
    Ok(g.affine(s, half, -half * n))
}

/// Differentiable GP KL for one latent dimension; `mu` and `logvar` are
/// length-`n` vectors over the grid.
pub fn kl_gp_node<T: Scalar>(
    g: &mut Graph<T>,
    mu: Var,
    logvar: Var,
    factor: &GramFactor<T>,
) -> Result<Var> {
    let n = factor.n;
    if g.value(mu).numel() != n || g.value(logvar).numel() != n {
        return Err(DlgError::Parameter(format!(
            "posterior length differs from grid size {n}"
        )));
    }
    let diag: Vec<T> = (0..n).map(|i| factor.inverse[i * n + i]).collect();
    let diag = g.constant(Tensor::vector(diag));
    let kinv = g.constant(Tensor::matrix(n, n, factor.inverse.clone())?);
    let v = g.exp(logvar);
    let tr = g.mul(v, diag)?;
    let tr = g.sum(tr);
    let col = g.reshape(mu, vec![n, 1])?;
    let row = g.reshape(mu, vec![1, n])?;
    let kmu = g.matmul(kinv, col)?;
    let quad = g.matmul(row, kmu)?;
    let quad = g.reshape(quad, vec![])?;
    let slv = g.sum(logvar);
    let a = g.add(tr, quad)?;
    let a = g.sub(a, slv)?;
    let half = T::lit(0.5);
    Ok(g.affine(a, half, half * (factor.logdet - T::lit(n as f64))))
}

/// Differentiable `log N(z; μ, diag σ²)`.
pub fn log_normal_node<T: Scalar>(g: &mut Graph<T>, z: Var, mu: Var, logvar: Var) -> Result<Var> {
    let n = g.value(z).numel();
    let d = g.sub(z, mu)?;
    let d2 = g.square(d);
    let nlv = g.neg(logvar);
    let prec = g.exp(nlv);
    let q = g.mul(d2, prec)?;
    let t = g.add(q, logvar)?;
    let s = g.sum(t);
    let c = T::lit(-0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln());
    Ok(g.affine(s, T::lit(-0.5), c))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_values() {
        let rbf = GpPrior::new(Kernel::Rbf, 1.0).unwrap();
        assert_eq!(rbf.k(0.0), 1.0);
        assert!((rbf.k(1.0) - (-0.5f64).exp()).abs() < 1e-12);
        let m = GpPrior::new(Kernel::Matern32, 2.0).unwrap();
        assert_eq!(m.k(0.0), 1.0);
        let a = 3f64.sqrt() * 0.5;
        assert!((m.k(1.0) - (1.0 + a) * (-a).exp()).abs() < 1e-15);
        assert!(GpPrior::new(Kernel::Rbf, 0.0).is_err());
        assert!(GpPrior::new(Kernel::Rbf, -1.0).is_err());
    }

    #[test]
    fn gram_has_jittered_unit_diagonal() {
        let p = GpPrior::new(Kernel::Matern32, 0.5).unwrap();
        let k = p.gram::<f64>(&[0.0, 1.0, 2.5]).unwrap();
        for i in 0..3 {
            assert_eq!(k[i * 3 + i], 1.0 + JITTER);
            for j in 0..3 {
                assert_eq!(k[i * 3 + j], k[j * 3 + i]);
            }
        }
    }

    #[test]
    fn diag_kl_closed_forms() {
        assert_eq!(kl_gaussian_diag(&[0.0], &[0.0]), 0.0);
        assert_eq!(kl_gaussian_diag(&[1.0], &[0.0]), 0.5);
    }

    #[test]
    fn prior_layout() {
        let priors = prior_grid(&[Kernel::Rbf, Kernel::Matern32], &[2.0, 1.0, 0.5, 0.25]).unwrap();
        assert_eq!(priors.len(), 8);
        assert_eq!(
            priors[0],
            GpPrior {
                kernel: Kernel::Rbf,
                length_scale: 2.0
            }
        );
        assert_eq!(
            priors[5],
            GpPrior {
                kernel: Kernel::Matern32,
                length_scale: 1.0
            }
        );
        let dims = assign_dims(16, 8);
        assert_eq!(dims, vec![0, 0, 1, 1, 2, 2, 3, 3, 4, 4, 5, 5, 6, 6, 7, 7]);
        assert_eq!(assign_dims(3, 8), vec![0, 2, 5]);
    }

    #[test]
    fn graph_kl_matches_plain() {
        let p = GpPrior::new(Kernel::Rbf, 1.0).unwrap();
        let f = p.factor::<f64>(&[0.0, 1.0, 2.0, 3.0]).unwrap();
        let mu = [0.3, -0.2, 0.8, 0.1];
        let lv = [-0.5, 0.2, 0.0, -1.0];
        let plain = kl_gaussian_gp(&mu, &lv, &f).unwrap();
        let mut g = Graph::<f64>::new();
        let m = g.variable(Tensor::vector(mu.to_vec()));
        let l = g.variable(Tensor::vector(lv.to_vec()));
        let node = kl_gp_node(&mut g, m, l, &f).unwrap();
        assert!((g.item(node) - plain).abs() < 1e-12);
        let node = kl_diag_node(&mut g, m, l).unwrap();
        assert!((g.item(node) - kl_gaussian_diag(&mu, &lv)).abs() < 1e-12);
    }

    #[test]
    fn log_normal_matches_formula() {
        let mut g = Graph::<f64>::new();
        let mu = g.variable(Tensor::vector(vec![0.5, -1.0]));
        let lv = g.variable(Tensor::vector(vec![0.0, 2.0f64.ln()]));
        let z = g.constant(Tensor::vector(vec![1.0, 0.0]));
        let node = log_normal_node(&mut g, z, mu, lv).unwrap();
        let expect = -0.5 * (2.0 * std::f64::consts::PI).ln() - 0.125
            + (-0.5 * (4.0 * std::f64::consts::PI).ln() - 0.25);
        assert!((g.item(node) - expect).abs() < 1e-14);
    }
}
