//! Shared controller plumbing, the open-loop baseline and the basic random-search controller.

use nalgebra::DVector;

use crate::bayes::VmObjective;
use crate::cost::{cost, mcc, CostWeights};
use crate::error::{check_dim, Error, Result};
use crate::plant::{ControlRecipe, DisturbanceModel, Plant, ProcessLine, RecipeBox, SimulatedLine};
use crate::rng::StreamKey;
use crate::search::{sgd_search, PrsOracle, SgdConfig};

/// Everything a searching controller needs besides the disturbance.
pub struct SearchContext<'a> {
    pub plant: &'a dyn Plant,
    pub target: DVector<f64>,
    pub weights: CostWeights,
    pub sgd: SgdConfig,
    pub bounds: RecipeBox,
    /// Where the search of the first run starts; later runs start from the
    /// previous run's recipe.
    pub initial_recipe: DVector<f64>,
}

impl<'a> SearchContext<'a> {
    pub fn new(
        plant: &'a dyn Plant,
        target: DVector<f64>,
        weights: CostWeights,
        sgd: SgdConfig,
        bounds: RecipeBox,
    ) -> Result<Self> {
        check_dim("target", plant.output_dim(), target.len())?;
        check_dim("Q", plant.output_dim(), weights.output_dim())?;
        check_dim("R", plant.input_dim(), weights.input_dim())?;
        sgd.validate()?;
        Ok(SearchContext {
            initial_recipe: DVector::zeros(plant.input_dim()),
            plant,
            target,
            weights,
            sgd,
            bounds,
        })
    }

    pub fn with_initial_recipe(mut self, u: DVector<f64>) -> Result<Self> {
        check_dim("initial recipe", self.input_dim(), u.len())?;
        if !self.bounds.contains(&u) {
            return Err(Error::Contract(format!(
                "initial recipe {:?} lies outside the recipe box",
                u.as_slice()
            )));
        }
        self.initial_recipe = u;
        Ok(self)
    }

    pub fn input_dim(&self) -> usize {
        self.plant.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.plant.output_dim()
    }
}

/// One executed run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub t: usize,
    pub recipe: DVector<f64>,
    pub output: DVector<f64>,
    pub cost: f64,
    /// Buffer record replayed for this run (online matching only).
    pub matched_record: Option<usize>,
    pub kl: Option<f64>,
}

/// The runs of one production cycle.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub runs: Vec<RunRecord>,
}

impl Trajectory {
    pub fn costs(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.cost).collect()
    }

    pub fn mcc(&self) -> Result<f64> {
        mcc(&self.costs())
    }
}

/// Applies `u` on the line and scores the run.
pub(crate) fn execute_run(
    line: &mut dyn ProcessLine,
    u: &ControlRecipe,
    t: usize,
    weights: &CostWeights,
    target: &DVector<f64>,
) -> Result<RunRecord> {
    let y = line.apply(u, t)?;
    let c = cost(&y, u, weights, target)?;
    Ok(RunRecord {
        t,
        recipe: u.values().clone(),
        output: y.into_inner(),
        cost: c,
        matched_record: None,
        kl: None,
    })
}

fn check_horizon(horizon: usize) -> Result<()> {
    if horizon == 0 {
        return Err(Error::Contract("horizon must be at least one run".into()));
    }
    Ok(())
}

/// Open loop at the zero recipe.
pub fn run_no_control(
    plant: &dyn Plant,
    model: &DisturbanceModel,
    target: &DVector<f64>,
    weights: &CostWeights,
    horizon: usize,
    disturbance_key: StreamKey,
) -> Result<Trajectory> {
    check_horizon(horizon)?;
    let mut line = SimulatedLine::new(plant, model, disturbance_key)?;
    let u = ControlRecipe::zeros(plant.input_dim());
    let runs = (1..=horizon)
        .map(|t| execute_run(&mut line, &u, t, weights, target))
        .collect::<Result<Vec<_>>>()?;
    Ok(Trajectory { runs })
}

/// Random search on the observed run cost, without any disturbance belief.
///
/// Candidate recipes are scored on virtual measurements whose disturbance is
/// drawn from the unconditional run-`t` distribution of the generator.
pub fn run_basic_mfrl(
    ctx: &SearchContext<'_>,
    model: &DisturbanceModel,
    horizon: usize,
    disturbance_key: StreamKey,
    search_key: StreamKey,
) -> Result<Trajectory> {
    check_horizon(horizon)?;
    let mut line = SimulatedLine::new(ctx.plant, model, disturbance_key)?;
    let mut u = ctx.initial_recipe.clone();
    let mut runs = Vec::with_capacity(horizon);
    for t in 1..=horizon {
        let (mean, cov) = model.marginal(t);
        let objective = VmObjective::new(ctx.plant, t, &mean, &cov, &ctx.target, &ctx.weights, true)?;
        let mut oracle = PrsOracle {
            objective,
            probe_radius: ctx.sgd.probe_radius,
        };
        let mut rng = search_key.child(t as u64).rng();
        let outcome = sgd_search(&mut oracle, &u, &ctx.sgd, &ctx.bounds, &mut rng, false)?;
        u = outcome.recipe;
        let recipe = ControlRecipe::new(u.clone())?;
        runs.push(execute_run(&mut line, &recipe, t, &ctx.weights, &ctx.target)?);
    }
    Ok(Trajectory { runs })
}
