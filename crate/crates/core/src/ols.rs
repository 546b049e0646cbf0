//! Ordinary least squares with coefficient covariance.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{ensure_finite_mat, ensure_finite_vec, symmetrize};

#[derive(Debug, Clone, PartialEq)]
pub struct OlsFit {
    pub coef: DVector<f64>,
    /// `(XᵀX)⁻¹`.
    pub xtx_inv: DMatrix<f64>,
    /// `y − Xβ̂`.
    pub residuals: DVector<f64>,
    /// Unbiased residual variance `SSR / (n − p)`.
    pub residual_var: f64,
}

impl OlsFit {
    /// `s² (XᵀX)⁻¹`.
    pub fn coef_cov(&self) -> DMatrix<f64> {
        &self.xtx_inv * self.residual_var
    }
}

/// Least squares via the SVD; fails on rank-deficient designs.
pub fn ols(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<OlsFit> {
    check_dim("response", x.nrows(), y.len())?;
    ensure_finite_mat("design matrix", x)?;
    ensure_finite_vec("response", y)?;
    let (n, p) = x.shape();
    if n <= p {
        return Err(Error::Contract(format!(
            "least squares needs more rows than columns, got {n} x {p}"
        )));
    }
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * 1e-10 * n as f64;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    if rank < p {
        return Err(Error::Numeric(format!(
            "design matrix is rank deficient: rank {rank} < {p} columns (singular values {:?})",
            svd.singular_values.as_slice()
        )));
    }
    let coef = svd
        .solve(y, tol)
        .map_err(|e| Error::Numeric(format!("least squares solve failed: {e}")))?;
    let v_t = svd.v_t.as_ref().expect("SVD computed with V");
    let inv_sq = svd.singular_values.map(|s| 1.0 / (s * s));
    let xtx_inv = symmetrize(&(v_t.transpose() * DMatrix::from_diagonal(&inv_sq) * v_t));
    let residuals = y - x * &coef;
    let residual_var = residuals.norm_squared() / (n - p) as f64;
    Ok(OlsFit {
        coef,
        xtx_inv,
        residuals,
        residual_var,
    })
}
