//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub fn ensure_finite_vec(what: &str, v: &DVector<f64>) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} contains a non-finite entry")))
    }
}

pub fn ensure_finite_mat(what: &str, m: &DMatrix<f64>) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} contains a non-finite entry")))
    }
}

pub fn is_symmetric(m: &DMatrix<f64>, rel_tol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    let scale = m.amax().max(f64::MIN_POSITIVE);
    (0..m.nrows()).all(|i| (0..i).all(|j| (m[(i, j)] - m[(j, i)]).abs() <= rel_tol * scale))
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Inverse of a symmetric positive definite matrix via Cholesky.
pub fn spd_inverse(what: &str, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = m.clone().cholesky().ok_or_else(|| {
        Error::Numeric(format!(
            "{what} is not positive definite (Cholesky failed); matrix = {m:?}"
        ))
    })?;
    Ok(symmetrize(&chol.inverse()))
}

/// Natural log of the determinant of a symmetric positive definite matrix.
pub fn spd_log_det(what: &str, m: &DMatrix<f64>) -> Result<f64> {
    let chol = m.clone().cholesky().ok_or_else(|| {
        Error::Numeric(format!("{what} is not positive definite; matrix = {m:?}"))
    })?;
    Ok(2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// True when every eigenvalue is at least `-tol * scale`.
pub fn is_psd(m: &DMatrix<f64>, tol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    if m.nrows() == 0 {
        return true;
    }
    let scale = m.amax().max(1.0);
    let eig = symmetrize(m).symmetric_eigen();
    eig.eigenvalues.iter().all(|&l| l >= -tol * scale)
}

/// Draws from N(mean, cov) for a positive semi-definite covariance.
#[derive(Debug, Clone)]
pub struct GaussianSampler {
    mean: DVector<f64>,
    factor: DMatrix<f64>,
}

impl GaussianSampler {
    pub fn new(mean: DVector<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::Dimension {
                what: "sampler covariance",
                expected: mean.len(),
                found: cov.nrows(),
            });
        }
        ensure_finite_mat("sampler covariance", cov)?;
        let factor = match cov.clone().cholesky() {
            Some(c) => c.unpack(),
            None => {
                // Singular PSD covariance: fall back to the eigen square root.
                if !is_psd(cov, 1e-10) {
                    return Err(Error::Numeric(format!(
                        "sampler covariance is not positive semi-definite: {cov:?}"
                    )));
                }
                let eig = symmetrize(cov).symmetric_eigen();
                let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
                &eig.eigenvectors * DMatrix::from_diagonal(&roots)
            }
        };
        Ok(GaussianSampler { mean, factor })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_iterator(
            self.dim(),
            (0..self.dim()).map(|_| rng.sample::<f64, _>(StandardNormal)),
        );
        &self.mean + &self.factor * z
    }
}

/// Sample covariance with the `n - 1` denominator; zero matrix for a single sample.
pub fn sample_covariance(samples: &[DVector<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    assert!(!samples.is_empty(), "sample_covariance needs at least one sample");
    let n = samples[0].len();
    let count = samples.len() as f64;
    let mean = samples
        .iter()
        .fold(DVector::zeros(n), |acc, s| acc + s)
        / count;
    let mut cov = DMatrix::zeros(n, n);
    if samples.len() > 1 {
        for s in samples {
            let c = s - &mean;
            cov += &c * c.transpose();
        }
        cov /= count - 1.0;
    }
    (mean, cov)
}
