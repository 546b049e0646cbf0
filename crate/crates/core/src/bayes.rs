//! Gaussian disturbance beliefs and their recursive update.

use nalgebra::{DMatrix, DVector};

use crate::cost::CostWeights;
use crate::error::{check_dim, Error, Result};
use crate::linalg::{ensure_finite_mat, ensure_finite_vec, is_psd, is_symmetric, symmetrize, GaussianSampler};
use crate::plant::{ControlRecipe, Plant, ProcessOutput};
use crate::rng::Stream;
use crate::search::Objective;

/// Gaussian summary `N(μ, Σ)` of the disturbance given the history.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl GaussianBelief {
    /// Requires a symmetric positive definite covariance.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        check_dim("belief covariance rows", n, cov.nrows())?;
        check_dim("belief covariance columns", n, cov.ncols())?;
        ensure_finite_vec("belief mean", &mean)?;
        ensure_finite_mat("belief covariance", &cov)?;
        if !is_symmetric(&cov, 1e-9) {
            return Err(Error::Numeric(format!("belief covariance is not symmetric: {cov:?}")));
        }
        if cov.clone().cholesky().is_none() {
            return Err(Error::Numeric(format!(
                "belief covariance is not positive definite: {cov:?}"
            )));
        }
        Ok(GaussianBelief { mean, cov })
    }

    /// A degenerate belief with zero covariance. Usable for sampling and cost
    /// evaluation, rejected by operations that factor the covariance.
    pub fn point(mean: DVector<f64>) -> Self {
        let n = mean.len();
        GaussianBelief {
            mean,
            cov: DMatrix::zeros(n, n),
        }
    }

    pub fn scalar(mean: f64, var: f64) -> Result<Self> {
        Self::new(DVector::from_element(1, mean), DMatrix::from_element(1, 1, var))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Sampler for the centered fluctuation `δ ~ N(0, Σ)`.
    pub fn fluctuation_sampler(&self) -> Result<GaussianSampler> {
        GaussianSampler::new(DVector::zeros(self.dim()), &self.cov)
    }
}

/// How the replicated search outputs turn into an observation covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ObsCovConvention {
    /// `Σ_y / N`: the variance of the batch-mean output.
    #[default]
    SampleMean,
    /// `N · Σ_y`.
    Scaled,
}

impl ObsCovConvention {
    pub fn apply(self, output_cov: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
        match self {
            ObsCovConvention::SampleMean => output_cov / n as f64,
            ObsCovConvention::Scaled => output_cov * n as f64,
        }
    }
}

/// Converged recipes of one control search together with one virtual
/// measurement per recipe.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergedBatch {
    pub recipes: Vec<DVector<f64>>,
    pub outputs: Vec<DVector<f64>>,
    pub mean_recipe: DVector<f64>,
    pub output_mean: DVector<f64>,
    pub output_cov: DMatrix<f64>,
    /// Iterations spent before the averaging window started.
    pub search_iterations: usize,
    pub converged: bool,
}

impl ConvergedBatch {
    pub fn len(&self) -> usize {
        self.recipes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.recipes.is_empty()
    }
}

/// Conjugate fusion of a Gaussian prior with an observation `s ~ N(d, Σ_obs)`.
///
/// Computed in gain form, `K = Σ (Σ + Σ_obs)⁻¹`, which equals the precision-weighted
/// combination but stays well conditioned when `Σ_obs` is huge.
pub fn fuse(
    prior: &GaussianBelief,
    observation: &DVector<f64>,
    obs_cov: &DMatrix<f64>,
) -> Result<GaussianBelief> {
    let n = prior.dim();
    check_dim("observation", n, observation.len())?;
    check_dim("observation covariance", n, obs_cov.nrows())?;
    ensure_finite_vec("observation", observation)?;
    ensure_finite_mat("observation covariance", obs_cov)?;
    if obs_cov.clone().cholesky().is_none() {
        return Err(Error::Numeric(format!(
            "observation covariance is not positive definite: {obs_cov:?}"
        )));
    }
    let innovation_cov = symmetrize(&(prior.cov() + obs_cov));
    let chol = innovation_cov.cholesky().ok_or_else(|| {
        Error::Numeric("prior plus observation covariance is singular".into())
    })?;
    // K = Σ S⁻¹ = (S⁻¹ Σ)ᵀ since both are symmetric.
    let gain = chol.solve(prior.cov()).transpose();
    let mean = prior.mean() + &gain * (observation - prior.mean());
    let cov = symmetrize(&(prior.cov() - &gain * prior.cov()));
    GaussianBelief::new(mean, cov)
}

/// Bayesian update of the disturbance belief from the realized output.
///
/// The disturbance observation is `s = y − ĝ(ū)` with `ĝ(ū) = ȳ_batch − μ`,
/// and its covariance follows `convention`.
pub fn posterior_update(
    prior: &GaussianBelief,
    batch: &ConvergedBatch,
    observed: &ProcessOutput,
    convention: ObsCovConvention,
) -> Result<GaussianBelief> {
    if batch.is_empty() {
        return Err(Error::Contract("posterior update needs a nonempty batch".into()));
    }
    check_dim("observed output", prior.dim(), observed.dim())?;
    check_dim("batch output mean", prior.dim(), batch.output_mean.len())?;
    let g_hat = &batch.output_mean - prior.mean();
    let s = observed.values() - g_hat;
    let obs_cov = convention.apply(&batch.output_cov, batch.len());
    fuse(prior, &s, &obs_cov)
}

/// Random-walk propagation: same mean, covariance inflated by the process noise.
pub fn propagate_prior(
    posterior: &GaussianBelief,
    process_noise_cov: &DMatrix<f64>,
) -> Result<GaussianBelief> {
    check_dim("process noise", posterior.dim(), process_noise_cov.nrows())?;
    if !is_psd(process_noise_cov, 1e-12) {
        return Err(Error::Numeric("process noise covariance must be PSD".into()));
    }
    GaussianBelief::new(
        posterior.mean().clone(),
        symmetrize(&(posterior.cov() + process_noise_cov)),
    )
}

/// Expected run cost `tr(QΣ) + M`, where `M` is the searched objective value.
pub fn expected_cost_decomposition(belief: &GaussianBelief, w: &CostWeights, m_value: f64) -> f64 {
    (w.q() * belief.cov()).trace() + m_value
}

/// One noisy realization of `H(u | μ) = (g(u) + μ + δ − y*)ᵀ Q (g(u) + μ + δ − y*)`
/// with `δ ~ N(0, Σ)`.
pub fn objective_h(
    plant: &dyn Plant,
    u: &ControlRecipe,
    t: usize,
    belief: &GaussianBelief,
    target: &DVector<f64>,
    w: &CostWeights,
    rng: &mut Stream,
) -> Result<f64> {
    check_dim("recipe", plant.input_dim(), u.dim())?;
    check_dim("belief", plant.output_dim(), belief.dim())?;
    let delta = belief.fluctuation_sampler()?.sample(rng);
    let y = plant.response(u.values(), t) + belief.mean() + delta;
    Ok(w.output_term(&y, target))
}

/// Noise-free searched objective `M(u | μ) = (g(u) + μ − y*)ᵀ Q (g(u) + μ − y*) + uᵀRu`.
pub fn objective_m(
    plant: &dyn Plant,
    u: &ControlRecipe,
    t: usize,
    belief_mean: &DVector<f64>,
    target: &DVector<f64>,
    w: &CostWeights,
) -> Result<f64> {
    check_dim("recipe", plant.input_dim(), u.dim())?;
    check_dim("belief mean", plant.output_dim(), belief_mean.len())?;
    let y = plant.response(u.values(), t) + belief_mean;
    Ok(w.output_term(&y, target) + w.recipe_term(u.values()))
}

/// Virtual-metrology objective: the plant response shifted by a disturbance
/// drawn from `N(mean, cov)` (cov may be singular), scored by the run cost.
///
/// The two points of a finite-difference pair share one disturbance draw.
pub struct VmObjective<'a> {
    plant: &'a dyn Plant,
    t: usize,
    disturbance: GaussianSampler,
    target: &'a DVector<f64>,
    weights: &'a CostWeights,
    include_recipe_term: bool,
}

impl<'a> VmObjective<'a> {
    /// `include_recipe_term` adds `uᵀRu` to every evaluation; leave it off when the
    /// caller adds the analytic `2Ru` gradient itself.
    pub fn new(
        plant: &'a dyn Plant,
        t: usize,
        disturbance_mean: &DVector<f64>,
        disturbance_cov: &DMatrix<f64>,
        target: &'a DVector<f64>,
        weights: &'a CostWeights,
        include_recipe_term: bool,
    ) -> Result<Self> {
        check_dim("disturbance mean", plant.output_dim(), disturbance_mean.len())?;
        check_dim("target", plant.output_dim(), target.len())?;
        check_dim("cost weights", plant.output_dim(), weights.output_dim())?;
        check_dim("cost weights", plant.input_dim(), weights.input_dim())?;
        Ok(VmObjective {
            plant,
            t,
            disturbance: GaussianSampler::new(disturbance_mean.clone(), disturbance_cov)?,
            target,
            weights,
            include_recipe_term,
        })
    }

    /// One virtual measurement of the output at `u`.
    pub fn measure(&self, u: &DVector<f64>, rng: &mut Stream) -> DVector<f64> {
        self.plant.response(u, self.t) + self.disturbance.sample(rng)
    }

    fn score(&self, y: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let mut c = self.weights.output_term(y, self.target);
        if self.include_recipe_term {
            c += self.weights.recipe_term(u);
        }
        c
    }
}

impl Objective for VmObjective<'_> {
    fn dim(&self) -> usize {
        self.plant.input_dim()
    }

    fn eval_pair(
        &mut self,
        plus: &DVector<f64>,
        minus: &DVector<f64>,
        rng: &mut Stream,
    ) -> Result<(f64, f64)> {
        let d = self.disturbance.sample(rng);
        let yp = self.plant.response(plus, self.t) + &d;
        let ym = self.plant.response(minus, self.t) + d;
        Ok((self.score(&yp, plus), self.score(&ym, minus)))
    }
}
