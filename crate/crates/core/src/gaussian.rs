//! Multivariate Gaussian algebra.
//!
//! Every belief and message in the solvers is a [`Gaussian`]; joint
//! state-action beliefs are a [`JointGaussian`] with named block sizes.
//! Operations are pure and never mutate their inputs.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma_lr;

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mean: Vector,
    pub cov: Mat,
}

impl Gaussian {
    /// Builds a Gaussian, symmetrizing the covariance and checking it is PSD.
    pub fn new(mean: Vector, cov: Mat) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::ShapeMismatch(format!(
                "mean has dim {}, covariance is {}x{}",
                mean.len(),
                cov.nrows(),
                cov.ncols()
            )));
        }
        let cov = linalg::symmetrize(&cov);
        if !linalg::is_psd(&cov) || mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonPsdInput);
        }
        Ok(Self { mean, cov })
    }

    /// Internal constructor: symmetrizes but skips the eigenvalue check.
    pub(crate) fn from_parts(mean: Vector, cov: Mat) -> Self {
        debug_assert_eq!(mean.len(), cov.nrows());
        Self {
            mean,
            cov: linalg::symmetrize(&cov),
        }
    }

    pub fn scalar(mean: f64, var: f64) -> Self {
        Self::from_parts(Vector::from_element(1, mean), Mat::from_element(1, 1, var))
    }

    pub fn isotropic(mean: Vector, var: f64) -> Self {
        let n = mean.len();
        Self::from_parts(mean, Mat::identity(n, n) * var)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn is_finite(&self) -> bool {
        self.mean.iter().all(|v| v.is_finite()) && linalg::all_finite(&self.cov)
    }

    pub fn precision(&self) -> Result<Mat> {
        linalg::spd_inverse(&self.cov)
    }

    /// Squared Mahalanobis distance of `x` from the mean.
    pub fn mahalanobis_sq(&self, x: &Vector) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        let d = x - &self.mean;
        let sol = linalg::spd_solve(&self.cov, &Mat::from_column_slice(d.len(), 1, d.as_slice()))?;
        Ok(d.dot(&sol.column(0)))
    }

    pub fn log_density(&self, x: &Vector) -> Result<f64> {
        let m = self.mahalanobis_sq(x)?;
        let logdet = linalg::spd_logdet(&self.cov)?;
        let n = self.dim() as f64;
        Ok(-0.5 * (m + logdet + n * (2.0 * std::f64::consts::PI).ln()))
    }
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::ShapeMismatch(format!(
            "expected dim {expected}, got {got}"
        )));
    }
    Ok(())
}

/// Gaussian over a stacked vector of consecutive blocks, e.g. `(x, u)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointGaussian {
    pub gaussian: Gaussian,
    pub blocks: Vec<usize>,
}

impl JointGaussian {
    pub fn new(gaussian: Gaussian, blocks: Vec<usize>) -> Result<Self> {
        check_dim(gaussian.dim(), blocks.iter().sum())?;
        Ok(Self { gaussian, blocks })
    }

    /// Independent joint of two Gaussians (zero cross-covariance).
    pub fn independent(a: &Gaussian, b: &Gaussian) -> Self {
        Self {
            gaussian: Gaussian::from_parts(
                linalg::stack(&a.mean, &b.mean),
                linalg::block_diag(&a.cov, &b.cov),
            ),
            blocks: vec![a.dim(), b.dim()],
        }
    }

    fn offset(&self, block: usize) -> Result<usize> {
        if block >= self.blocks.len() {
            return Err(Error::ShapeMismatch(format!("no block {block}")));
        }
        Ok(self.blocks[..block].iter().sum())
    }

    pub fn mean(&self) -> &Vector {
        &self.gaussian.mean
    }

    pub fn cov(&self) -> &Mat {
        &self.gaussian.cov
    }

    pub fn marginal(&self, block: usize) -> Result<Gaussian> {
        let o = self.offset(block)?;
        let n = self.blocks[block];
        Ok(Gaussian::from_parts(
            self.gaussian.mean.rows(o, n).into_owned(),
            self.gaussian.cov.view((o, o), (n, n)).into_owned(),
        ))
    }

    /// Cross-covariance `Cov(block a, block b)`.
    pub fn cross(&self, a: usize, b: usize) -> Result<Mat> {
        let (oa, ob) = (self.offset(a)?, self.offset(b)?);
        Ok(self
            .gaussian
            .cov
            .view((oa, ob), (self.blocks[a], self.blocks[b]))
            .into_owned())
    }

    /// Indices not belonging to `block`, in order.
    fn complement(&self, block: usize) -> Result<Vec<usize>> {
        let o = self.offset(block)?;
        let n = self.blocks[block];
        Ok((0..self.gaussian.dim())
            .filter(|&i| i < o || i >= o + n)
            .collect())
    }
}

/// `p(other blocks | block = value)`.
pub fn condition(joint: &JointGaussian, block: usize, value: &Vector) -> Result<Gaussian> {
    let o = joint.offset(block)?;
    let n = joint.blocks[block];
    check_dim(n, value.len())?;
    let rest = joint.complement(block)?;
    let m = rest.len();
    let cov = joint.cov();
    let mean = joint.mean();

    let s_bb = cov.view((o, o), (n, n)).into_owned();
    let mut s_rb = Mat::zeros(m, n);
    let mut s_rr = Mat::zeros(m, m);
    let mut mu_r = Vector::zeros(m);
    for (i, &ri) in rest.iter().enumerate() {
        mu_r[i] = mean[ri];
        for j in 0..n {
            s_rb[(i, j)] = cov[(ri, o + j)];
        }
        for (j, &rj) in rest.iter().enumerate() {
            s_rr[(i, j)] = cov[(ri, rj)];
        }
    }
    // gain = S_rb S_bb^-1
    let gain = linalg::spd_solve(&s_bb, &s_rb.transpose())?.transpose();
    let innov = value - mean.rows(o, n);
    let new_mean = mu_r + &gain * innov;
    let new_cov = s_rr - &gain * s_rb.transpose();
    Ok(Gaussian::from_parts(new_mean, new_cov))
}

/// `N(A mu + b, A Sigma A^T + noise)`.
pub fn propagate_linear(g: &Gaussian, a: &Mat, b: &Vector, noise_cov: &Mat) -> Result<Gaussian> {
    if a.ncols() != g.dim()
        || a.nrows() != b.len()
        || noise_cov.nrows() != b.len()
        || noise_cov.ncols() != b.len()
    {
        return Err(Error::ShapeMismatch(format!(
            "A is {}x{}, input dim {}, offset dim {}, noise {}x{}",
            a.nrows(),
            a.ncols(),
            g.dim(),
            b.len(),
            noise_cov.nrows(),
            noise_cov.ncols()
        )));
    }
    Ok(Gaussian::from_parts(
        a * &g.mean + b,
        a * &g.cov * a.transpose() + noise_cov,
    ))
}

fn nearly_singular(m: &Mat) -> bool {
    if m.nrows() == 0 {
        return false;
    }
    let e = linalg::symmetrize(m).symmetric_eigen().eigenvalues;
    let max = e.iter().cloned().fold(0.0_f64, f64::max);
    let min = e.iter().cloned().fold(f64::INFINITY, f64::min);
    max <= 0.0 || min <= 1e-14 * max
}

/// Precision-weighted product of two Gaussian densities (renormalized).
///
/// Evaluated in covariance form so that one degenerate input is allowed.
pub fn fuse(a: &Gaussian, b: &Gaussian) -> Result<Gaussian> {
    check_dim(a.dim(), b.dim())?;
    if nearly_singular(&a.cov) && nearly_singular(&b.cov) {
        return Err(Error::SingularCovariance(
            "both fused inputs are singular".into(),
        ));
    }
    // Sigma = Sa - Sa (Sa + Sb)^-1 Sa, mu = mu_a + Sa (Sa + Sb)^-1 (mu_b - mu_a)
    let sum = &a.cov + &b.cov;
    let gain = linalg::spd_solve(&sum, &a.cov)?.transpose();
    let mean = &a.mean + &gain * (&b.mean - &a.mean);
    let cov = &a.cov - &gain * &a.cov;
    Ok(Gaussian::from_parts(mean, cov))
}

/// `KL(p || q)` for Gaussians.
pub fn kl(p: &Gaussian, q: &Gaussian) -> Result<f64> {
    check_dim(p.dim(), q.dim())?;
    if p.mean == q.mean && p.cov == q.cov {
        return Ok(0.0);
    }
    if nearly_singular(&q.cov) {
        return Err(Error::SingularCovariance("KL reference covariance".into()));
    }
    let n = p.dim() as f64;
    let q_inv_p = linalg::spd_solve(&q.cov, &p.cov)?;
    let d = &q.mean - &p.mean;
    let q_inv_d = linalg::spd_solve(&q.cov, &Mat::from_column_slice(d.len(), 1, d.as_slice()))?;
    let logdet_q = linalg::spd_logdet(&q.cov)?;
    let logdet_p = linalg::spd_logdet(&p.cov)?;
    let v = 0.5 * (q_inv_p.trace() + d.dot(&q_inv_d.column(0)) - n + logdet_q - logdet_p);
    Ok(v.max(0.0))
}

/// Quantile of the chi-squared distribution with `k` degrees of freedom,
/// by bisection on the regularized lower incomplete gamma function.
pub fn chi2_quantile(k: usize, p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidProbability(p));
    }
    let a = k as f64 / 2.0;
    let cdf = |x: f64| gamma_lr(a, x / 2.0);
    let mut hi = k.max(1) as f64;
    while cdf(hi) < p {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    while hi - lo > 1e-10 * hi.max(1.0) {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Weight given by the confidence-region reading of `p(x_t = x)`: 1 inside the
/// `p`-confidence ellipsoid, decaying as `exp(-(d^2 - q)/2)` outside it.
pub fn membership_weight(g: &Gaussian, x: &Vector, p: f64) -> Result<f64> {
    let q = chi2_quantile(g.dim(), p)?;
    membership_weight_with_quantile(g, x, q)
}

/// As [`membership_weight`] with a precomputed quantile.
pub fn membership_weight_with_quantile(g: &Gaussian, x: &Vector, quantile: f64) -> Result<f64> {
    let d2 = g.mahalanobis_sq(x)?;
    Ok((-0.5 * (d2 - quantile).max(0.0)).exp())
}
