//! Fréchet distance between Gaussian fits of two feature sets.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::Array2;

use crate::error::{config_err, Result};

pub const COV_REG: f64 = 1e-6;

fn moments(x: &Array2<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = x.dim();
    let m = DMatrix::from_fn(n, d, |i, j| x[[i, j]]);
    let mean = DVector::from_fn(d, |j, _| m.column(j).mean());
    let centered = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mean[j]);
    let denom = (n.max(2) - 1) as f64;
    let mut cov = centered.transpose() * &centered / denom;
    cov = (&cov + cov.transpose()) * 0.5;
    for j in 0..d {
        cov[(j, j)] += COV_REG;
    }
    (mean, cov)
}

/// Symmetric square root via eigendecomposition, negative eigenvalues
/// clamped to zero.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

/// `‖μ_a − μ_b‖² + Tr(Σ_a + Σ_b − 2(Σ_a Σ_b)^{1/2})` with `1e-6·I` added to
/// each covariance. The cross term is evaluated as
/// `Tr((Σ_a^{1/2} Σ_b Σ_a^{1/2})^{1/2})`, which has the same trace and stays
/// symmetric.
pub fn fid(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    let d = a.ncols();
    if b.ncols() != d {
        return Err(config_err(format!("feature widths differ: {d} vs {}", b.ncols())));
    }
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(config_err("fid needs non-empty feature sets"));
    }
    if a.nrows() < d || b.nrows() < d {
        log::warn!("fid: fewer samples ({}, {}) than feature width {d}", a.nrows(), b.nrows());
    }
    let (mu_a, cov_a) = moments(a);
    let (mu_b, cov_b) = moments(b);
    let diff = &mu_a - &mu_b;
    let ra = sqrtm_psd(&cov_a);
    let cross = sqrtm_psd(&(&ra * &cov_b * &ra)).trace();
    let value = diff.dot(&diff) + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    Ok(value.max(0.0))
}
