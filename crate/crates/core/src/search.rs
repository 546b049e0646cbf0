//! Finite-difference random search (stochastic gradient descent on a noisy oracle).

use nalgebra::DVector;
use rand::Rng;

use crate::error::{check_dim, Error, Result};
use crate::plant::{ControlRecipe, RecipeBox};
use crate::rng::Stream;

/// Hyperparameters of the random-search loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    /// Step size α.
    pub step_size: f64,
    /// Half-width ι of the central difference.
    pub probe_radius: f64,
    /// Stop once an update moves the iterate by less than η.
    pub convergence_tol: f64,
    pub max_iters: usize,
    /// Number N of post-convergence iterates averaged into the final recipe.
    pub averaging_window: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            step_size: 1e-3,
            probe_radius: 0.05,
            convergence_tol: 1e-4,
            max_iters: 2000,
            averaging_window: 50,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |x: f64| x > 0.0 && x.is_finite();
        if !positive(self.step_size) || !positive(self.probe_radius) || !positive(self.convergence_tol)
        {
            return Err(Error::Contract(format!(
                "step size, probe radius and tolerance must be positive, got {self:?}"
            )));
        }
        if self.max_iters == 0 || self.averaging_window == 0 {
            return Err(Error::Contract(
                "max_iters and averaging_window must be positive".into(),
            ));
        }
        if self.max_iters < self.averaging_window {
            return Err(Error::Contract(format!(
                "max_iters ({}) must be at least averaging_window ({})",
                self.max_iters, self.averaging_window
            )));
        }
        Ok(())
    }
}

/// A 0/1 mask selecting the coordinates perturbed by one probe.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeDirection(DVector<f64>);

impl ProbeDirection {
    pub fn new(mask: &[u8]) -> Result<Self> {
        if mask.iter().any(|&b| b > 1) {
            return Err(Error::Contract("probe mask entries must be 0 or 1".into()));
        }
        if mask.iter().all(|&b| b == 0) {
            return Err(Error::Contract("probe mask must not be all zero".into()));
        }
        Ok(ProbeDirection(DVector::from_iterator(
            mask.len(),
            mask.iter().map(|&b| b as f64),
        )))
    }

    /// Independent fair coin per coordinate; the all-zero mask is redrawn.
    pub fn sample<R: Rng + ?Sized>(m: usize, rng: &mut R) -> Self {
        assert!(m > 0, "probe direction needs at least one coordinate");
        loop {
            let v = DVector::from_fn(m, |_, _| if rng.random::<bool>() { 1.0 } else { 0.0 });
            if v.iter().any(|&x| x != 0.0) {
                return ProbeDirection(v);
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }
}

/// A noisy scalar function of the recipe.
pub trait Objective {
    fn dim(&self) -> usize;

    /// Evaluates `J(plus)` and `J(minus)`. Implementations may share one noise
    /// realization between the two points of a pair.
    fn eval_pair(
        &mut self,
        plus: &DVector<f64>,
        minus: &DVector<f64>,
        rng: &mut Stream,
    ) -> Result<(f64, f64)>;
}

/// Adapts a deterministic closure into an [`Objective`].
pub struct FnObjective<F> {
    dim: usize,
    f: F,
}

impl<F: FnMut(&DVector<f64>) -> f64> FnObjective<F> {
    pub fn new(dim: usize, f: F) -> Self {
        FnObjective { dim, f }
    }
}

impl<F: FnMut(&DVector<f64>) -> f64> Objective for FnObjective<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval_pair(
        &mut self,
        plus: &DVector<f64>,
        minus: &DVector<f64>,
        _rng: &mut Stream,
    ) -> Result<(f64, f64)> {
        Ok(((self.f)(plus), (self.f)(minus)))
    }
}

/// `[(J(u + ι·dir) − J(u − ι·dir)) / 2ι] · dir`.
pub fn estimate_gradient<O: Objective + ?Sized>(
    objective: &mut O,
    u: &DVector<f64>,
    dir: &ProbeDirection,
    probe_radius: f64,
    rng: &mut Stream,
) -> Result<DVector<f64>> {
    check_dim("probe direction", u.len(), dir.dim())?;
    if probe_radius.is_nan() || probe_radius <= 0.0 {
        return Err(Error::Contract(format!(
            "probe radius must be positive, got {probe_radius}"
        )));
    }
    let step = dir.as_vector() * probe_radius;
    let (jp, jm) = objective.eval_pair(&(u + &step), &(u - &step), rng)?;
    let slope = (jp - jm) / (2.0 * probe_radius);
    if !slope.is_finite() {
        return Err(Error::Numeric(format!(
            "objective returned non-finite values {jp} / {jm}"
        )));
    }
    Ok(dir.as_vector() * slope)
}

/// Anything that yields a (noisy) gradient at a recipe.
pub trait GradientOracle {
    fn dim(&self) -> usize;
    fn gradient(&mut self, u: &DVector<f64>, rng: &mut Stream) -> Result<DVector<f64>>;
}

/// Gradient by random-mask central differences of an objective.
pub struct PrsOracle<O> {
    pub objective: O,
    pub probe_radius: f64,
}

impl<O: Objective> GradientOracle for PrsOracle<O> {
    fn dim(&self) -> usize {
        self.objective.dim()
    }

    fn gradient(&mut self, u: &DVector<f64>, rng: &mut Stream) -> Result<DVector<f64>> {
        let dir = ProbeDirection::sample(u.len(), rng);
        estimate_gradient(&mut self.objective, u, &dir, self.probe_radius, rng)
    }
}

/// Result of one search.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub recipe: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Every iterate including the start point, when tracing was requested.
    pub trace: Vec<DVector<f64>>,
}

impl SearchOutcome {
    pub fn control_recipe(&self) -> Result<ControlRecipe> {
        ControlRecipe::new(self.recipe.clone())
    }
}

/// One projected update `clamp(u − α·g)`.
pub fn sgd_step<G: GradientOracle + ?Sized>(
    oracle: &mut G,
    u: &DVector<f64>,
    step_size: f64,
    bounds: &RecipeBox,
    rng: &mut Stream,
) -> Result<DVector<f64>> {
    let g = oracle.gradient(u, rng)?;
    let mut next = u - g * step_size;
    bounds.clamp_in_place(&mut next);
    Ok(next)
}

/// Projected SGD until the update norm drops below the tolerance or the
/// iteration budget runs out.
pub fn sgd_search<G: GradientOracle + ?Sized>(
    oracle: &mut G,
    u0: &DVector<f64>,
    cfg: &SgdConfig,
    bounds: &RecipeBox,
    rng: &mut Stream,
    keep_trace: bool,
) -> Result<SearchOutcome> {
    cfg.validate()?;
    check_dim("start recipe", oracle.dim(), u0.len())?;
    if !bounds.contains(u0) {
        return Err(Error::Contract(format!(
            "start recipe {:?} lies outside [{}, {}]",
            u0.as_slice(),
            bounds.lower,
            bounds.upper
        )));
    }
    let mut u = u0.clone();
    let mut trace = Vec::new();
    if keep_trace {
        trace.push(u.clone());
    }
    for k in 1..=cfg.max_iters {
        let next = sgd_step(oracle, &u, cfg.step_size, bounds, rng)?;
        let moved = (&next - &u).norm();
        u = next;
        if keep_trace {
            trace.push(u.clone());
        }
        if moved < cfg.convergence_tol {
            return Ok(SearchOutcome {
                recipe: u,
                iterations: k,
                converged: true,
                trace,
            });
        }
    }
    Ok(SearchOutcome {
        recipe: u,
        iterations: cfg.max_iters,
        converged: false,
        trace,
    })
}

/// Random search with finite-difference gradients, returning the full trace.
pub fn prs_search<O: Objective>(
    objective: O,
    u0: &ControlRecipe,
    cfg: &SgdConfig,
    bounds: &RecipeBox,
    rng: &mut Stream,
) -> Result<SearchOutcome> {
    let mut oracle = PrsOracle {
        objective,
        probe_radius: cfg.probe_radius,
    };
    sgd_search(&mut oracle, u0.values(), cfg, bounds, rng, true)
}

/// Runs `count` further updates from `u`, returning each new iterate.
pub fn continue_iterations<G: GradientOracle + ?Sized>(
    oracle: &mut G,
    u: &DVector<f64>,
    count: usize,
    step_size: f64,
    bounds: &RecipeBox,
    rng: &mut Stream,
) -> Result<Vec<DVector<f64>>> {
    let mut out = Vec::with_capacity(count);
    let mut cur = u.clone();
    for _ in 0..count {
        cur = sgd_step(oracle, &cur, step_size, bounds, rng)?;
        out.push(cur.clone());
    }
    Ok(out)
}
