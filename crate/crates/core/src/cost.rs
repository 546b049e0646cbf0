use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{ensure_finite_mat, ensure_finite_vec, is_psd, is_symmetric};
use crate::plant::{ControlRecipe, ProcessOutput};

/// Weights `Q` (outputs) and `R` (recipes) of the quadratic run cost.
#[derive(Debug, Clone, PartialEq)]
pub struct CostWeights {
    q: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl CostWeights {
    /// `Q` must be positive definite, `R` positive semi-definite.
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        ensure_finite_mat("Q", &q)?;
        ensure_finite_mat("R", &r)?;
        if !q.is_square() || !r.is_square() {
            return Err(Error::Contract("cost weights must be square".into()));
        }
        if !is_symmetric(&q, 1e-12) || q.clone().cholesky().is_none() {
            return Err(Error::Numeric("Q must be symmetric positive definite".into()));
        }
        if !is_symmetric(&r, 1e-12) || !is_psd(&r, 1e-12) {
            return Err(Error::Numeric("R must be symmetric positive semi-definite".into()));
        }
        Ok(CostWeights { q, r })
    }

    /// `Q = I_n`, `R = 0`.
    pub fn identity(n: usize, m: usize) -> Self {
        CostWeights {
            q: DMatrix::identity(n, n),
            r: DMatrix::zeros(m, m),
        }
    }

    /// `Q = I_n`, `R = diag(r)`.
    pub fn with_recipe_penalty(n: usize, r: &[f64]) -> Result<Self> {
        Self::new(
            DMatrix::identity(n, n),
            DMatrix::from_diagonal(&DVector::from_column_slice(r)),
        )
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn output_dim(&self) -> usize {
        self.q.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.r.nrows()
    }

    pub fn has_recipe_penalty(&self) -> bool {
        self.r.iter().any(|&x| x != 0.0)
    }

    /// `(y - y*)ᵀ Q (y - y*)` on raw vectors, unchecked.
    pub fn output_term(&self, y: &DVector<f64>, target: &DVector<f64>) -> f64 {
        let e = y - target;
        (self.q.transpose() * &e).dot(&e)
    }

    /// `uᵀ R u` on a raw vector, unchecked.
    pub fn recipe_term(&self, u: &DVector<f64>) -> f64 {
        (&self.r * u).dot(u)
    }
}

/// Quadratic run cost `(y - y*)ᵀ Q (y - y*) + uᵀ R u`.
pub fn cost(
    y: &ProcessOutput,
    u: &ControlRecipe,
    w: &CostWeights,
    target: &DVector<f64>,
) -> Result<f64> {
    check_dim("output", w.output_dim(), y.dim())?;
    check_dim("target", w.output_dim(), target.len())?;
    check_dim("recipe", w.input_dim(), u.dim())?;
    ensure_finite_vec("target", target)?;
    let c = w.output_term(y.values(), target) + w.recipe_term(u.values());
    if !c.is_finite() {
        return Err(Error::Numeric(format!("cost overflowed to {c}")));
    }
    Ok(c.max(0.0))
}

/// Mean control cost over a cycle.
pub fn mcc(costs: &[f64]) -> Result<f64> {
    if costs.is_empty() {
        return Err(Error::Contract("mean control cost of an empty cycle".into()));
    }
    Ok(costs.iter().sum::<f64>() / costs.len() as f64)
}
