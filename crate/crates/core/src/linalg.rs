//! Small dense helpers shared by the Gaussian kernel and the solvers.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative jitter level for inversions: `eps = JITTER * trace / n`.
pub const JITTER: f64 = 1e-9;

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

pub fn jitter_of(m: &Mat) -> f64 {
    let n = m.nrows().max(1) as f64;
    let tr = m.trace();
    if tr.is_finite() && tr > 0.0 {
        JITTER * tr / n
    } else {
        0.0
    }
}

/// Symmetrized copy with the jitter added to the diagonal.
pub fn jittered(m: &Mat) -> Mat {
    let mut out = symmetrize(m);
    let eps = jitter_of(m);
    for i in 0..out.nrows() {
        out[(i, i)] += eps;
    }
    out
}

/// Cholesky factor used for every inversion. The plain factor is kept when
/// all its pivots exceed the jitter level; otherwise the jittered matrix is
/// factored, so well-conditioned inputs are inverted without bias.
pub fn spd_factor(m: &Mat) -> Option<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let eps = jitter_of(m);
    if let Some(c) = symmetrize(m).cholesky() {
        let min_pivot = c
            .l_dirty()
            .diagonal()
            .iter()
            .fold(f64::INFINITY, |a, &d| a.min(d * d));
        if min_pivot > eps {
            return Some(c);
        }
    }
    jittered(m).cholesky()
}

/// Inverse of a symmetric PSD matrix (see [`spd_factor`]).
pub fn spd_inverse(m: &Mat) -> Result<Mat> {
    if m.nrows() != m.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} is not square",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.nrows() == 0 {
        return Ok(Mat::zeros(0, 0));
    }
    match spd_factor(m) {
        Some(c) => Ok(symmetrize(&c.inverse())),
        None => Err(Error::SingularCovariance(format!(
            "{}x{} block",
            m.nrows(),
            m.ncols()
        ))),
    }
}

/// Solves `m x = rhs` for symmetric PSD `m`.
pub fn spd_solve(m: &Mat, rhs: &Mat) -> Result<Mat> {
    if m.nrows() == 0 {
        return Ok(Mat::zeros(0, rhs.ncols()));
    }
    match spd_factor(m) {
        Some(c) => Ok(c.solve(rhs)),
        None => Err(Error::SingularCovariance(format!(
            "{}x{} block",
            m.nrows(),
            m.ncols()
        ))),
    }
}

/// Log-determinant of a symmetric PD matrix.
pub fn spd_logdet(m: &Mat) -> Result<f64> {
    if m.nrows() == 0 {
        return Ok(0.0);
    }
    match spd_factor(m) {
        Some(c) => Ok(2.0 * c.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()),
        None => Err(Error::SingularCovariance("log-determinant".into())),
    }
}

/// Lower Cholesky factor; the jittered matrix is factored when the plain one
/// fails, and the symmetric eigen square root is the last resort.
pub fn sqrt_factor(m: &Mat) -> Result<Mat> {
    if m.nrows() == 0 {
        return Ok(Mat::zeros(0, 0));
    }
    if let Some(c) = symmetrize(m).cholesky() {
        return Ok(c.l());
    }
    if let Some(c) = jittered(m).cholesky() {
        return Ok(c.l());
    }
    sym_sqrt(m)
}

/// Symmetric square root via eigendecomposition with negative eigenvalues
/// clipped to zero. Errors if the matrix is clearly indefinite.
pub fn sym_sqrt(m: &Mat) -> Result<Mat> {
    let e = symmetrize(m).symmetric_eigen();
    let max = e.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    if e.eigenvalues
        .iter()
        .any(|&l| l < -1e-10 * max.max(1e-300) - 1e-300)
    {
        return Err(Error::NonPsdInput);
    }
    let d = Mat::from_diagonal(&e.eigenvalues.map(|l| l.max(0.0).sqrt()));
    Ok(&e.eigenvectors * d * e.eigenvectors.transpose())
}

pub fn min_eigenvalue(m: &Mat) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    symmetrize(m)
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

pub fn max_eigenvalue(m: &Mat) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    symmetrize(m)
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max)
}

/// PSD test with the tolerance used throughout: `lambda_min >= -1e-10 * lambda_max`.
pub fn is_psd(m: &Mat) -> bool {
    if m.iter().any(|v| !v.is_finite()) {
        return false;
    }
    let e = symmetrize(m).symmetric_eigen().eigenvalues;
    let max = e.iter().cloned().fold(0.0_f64, f64::max);
    let min = e.iter().cloned().fold(f64::INFINITY, f64::min);
    min >= -1e-10 * max - 1e-300
}

pub fn block_diag(a: &Mat, b: &Mat) -> Mat {
    let n = a.nrows() + b.nrows();
    let mut out = Mat::zeros(n, n);
    out.view_mut((0, 0), (a.nrows(), a.ncols())).copy_from(a);
    out.view_mut((a.nrows(), a.ncols()), (b.nrows(), b.ncols()))
        .copy_from(b);
    out
}

pub fn stack(a: &Vector, b: &Vector) -> Vector {
    let mut out = Vector::zeros(a.len() + b.len());
    out.rows_mut(0, a.len()).copy_from(a);
    out.rows_mut(a.len(), b.len()).copy_from(b);
    out
}

pub fn all_finite(m: &Mat) -> bool {
    m.iter().all(|v| v.is_finite())
}

pub fn spectral_radius(m: &Mat) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .map(|c| c.norm())
        .fold(0.0, f64::max)
}

/// Moore-Penrose inverse of a symmetric PSD matrix, dropping eigenvalues
/// below `1e-12 * lambda_max`.
pub fn psd_pinv(m: &Mat) -> Mat {
    let n = m.nrows();
    let e = symmetrize(m).symmetric_eigen();
    let cut = 1e-12 * e.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let mut out = Mat::zeros(n, n);
    for (i, &l) in e.eigenvalues.iter().enumerate() {
        if l > cut && l > 0.0 {
            let v = e.eigenvectors.column(i);
            out += v * v.transpose() / l;
        }
    }
    out
}
