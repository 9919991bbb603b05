//! Small dense helpers shared by the fitting and generation code.

use nalgebra::{DMatrix, DVector};

/// Smallest eigenvalue kept when repairing a correlation matrix.
pub const EIGEN_FLOOR: f64 = 1e-6;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Inverse of a symmetric positive definite matrix, `None` when Cholesky fails.
pub fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let chol = m.clone().cholesky()?;
    Some(symmetrize(&chol.inverse()))
}

pub fn is_positive_definite(m: &DMatrix<f64>) -> bool {
    m.clone().cholesky().is_some()
}

pub fn trace(m: &DMatrix<f64>) -> f64 {
    m.diagonal().sum()
}

/// Quadratic form `x' A x`.
pub fn quad_form(a: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    x.dot(&(a * x))
}

/// Clip the eigenvalues of a symmetric matrix at `floor` and rescale the
/// result back to unit diagonal. Returns the repaired matrix and whether any
/// eigenvalue had to be clipped.
pub fn repair_correlation(m: &DMatrix<f64>, floor: f64) -> (DMatrix<f64>, bool) {
    let sym = symmetrize(m);
    let eig = sym.clone().symmetric_eigen();
    if eig.eigenvalues.iter().all(|&v| v >= floor) && is_positive_definite(&sym) {
        return (sym, false);
    }
    let clipped = eig.eigenvalues.map(|v| v.max(floor));
    let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    let n = rebuilt.nrows();
    let scale = DVector::from_iterator(n, (0..n).map(|i| 1.0 / rebuilt[(i, i)].sqrt()));
    let mut out = DMatrix::from_fn(n, n, |i, j| rebuilt[(i, j)] * scale[i] * scale[j]);
    for i in 0..n {
        out[(i, i)] = 1.0;
    }
    (symmetrize(&out), true)
}

/// Orthonormal basis of the null space of `c` (q x p, full row rank).
pub fn null_space(c: &DMatrix<f64>) -> DMatrix<f64> {
    let p = c.ncols();
    let q = c.nrows();
    let cct = c * c.transpose();
    let proj = match spd_inverse(&cct) {
        Some(inv) => DMatrix::identity(p, p) - c.transpose() * inv * c,
        None => DMatrix::identity(p, p),
    };
    let eig = symmetrize(&proj).symmetric_eigen();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let keep = p - q;
    DMatrix::from_fn(p, keep, |i, j| eig.eigenvectors[(i, order[j])])
}

pub fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}
