//! Offline learning: belief-aware control search, Bayesian disturbance tracking
//! and the memory buffer it produces.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::bayes::{
    posterior_update, propagate_prior, ConvergedBatch, GaussianBelief, ObsCovConvention,
    VmObjective,
};
use crate::controller::{execute_run, RunRecord, SearchContext};
use crate::error::{check_dim, Error, Result};
use crate::linalg::sample_covariance;
use crate::plant::{ControlRecipe, DisturbanceModel, ProcessOutput, SimulatedLine};
use crate::rng::{Stream, StreamKey};
use crate::search::{
    continue_iterations, estimate_gradient, sgd_search, GradientOracle, Objective, ProbeDirection,
};

/// How the disturbance belief starts and evolves between runs.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefConfig {
    pub process_noise: DMatrix<f64>,
    pub initial_prior: GaussianBelief,
    pub obs_cov: ObsCovConvention,
}

impl BeliefConfig {
    /// Process noise = innovation covariance of the generator; initial prior
    /// `N(0, 10 · process noise)`.
    pub fn from_model(model: &DisturbanceModel, obs_cov: ObsCovConvention) -> Result<Self> {
        let process_noise = model.innovation_cov();
        let initial_prior =
            GaussianBelief::new(DVector::zeros(model.dim()), &process_noise * 10.0)?;
        Ok(BeliefConfig {
            process_noise,
            initial_prior,
            obs_cov,
        })
    }
}

/// PRS gradient of `H` plus the exact `2Ru` term, both taken along the same
/// probe direction so that the estimate of `∇M` has one common scaling.
struct BeliefOracle<'a> {
    objective: VmObjective<'a>,
    probe_radius: f64,
    r2: DMatrix<f64>,
}

impl GradientOracle for BeliefOracle<'_> {
    fn dim(&self) -> usize {
        self.objective.dim()
    }

    fn gradient(&mut self, u: &DVector<f64>, rng: &mut Stream) -> Result<DVector<f64>> {
        let dir = ProbeDirection::sample(u.len(), rng);
        let g_h = estimate_gradient(&mut self.objective, u, &dir, self.probe_radius, rng)?;
        let e = dir.as_vector();
        let r_slope = e.dot(&(&self.r2 * u));
        Ok(g_h + e * r_slope)
    }
}

/// Searches the recipe minimizing `H(u | μ) + uᵀRu` under the belief, then keeps
/// iterating so that the batch holds `N` converged recipes, each with one
/// virtual measurement.
pub fn control_search(
    ctx: &SearchContext<'_>,
    t: usize,
    belief: &GaussianBelief,
    u0: &DVector<f64>,
    rng: &mut Stream,
) -> Result<ConvergedBatch> {
    check_dim("belief", ctx.output_dim(), belief.dim())?;
    let objective = VmObjective::new(
        ctx.plant,
        t,
        belief.mean(),
        belief.cov(),
        &ctx.target,
        &ctx.weights,
        false,
    )?;
    let mut oracle = BeliefOracle {
        objective,
        probe_radius: ctx.sgd.probe_radius,
        r2: ctx.weights.r() * 2.0,
    };
    let outcome = sgd_search(&mut oracle, u0, &ctx.sgd, &ctx.bounds, rng, false)?;
    let n = ctx.sgd.averaging_window;
    let mut recipes = Vec::with_capacity(n);
    recipes.push(outcome.recipe.clone());
    recipes.extend(continue_iterations(
        &mut oracle,
        &outcome.recipe,
        n - 1,
        ctx.sgd.step_size,
        &ctx.bounds,
        rng,
    )?);
    let vm = &oracle.objective;
    let outputs: Vec<DVector<f64>> = recipes.iter().map(|u| vm.measure(u, rng)).collect();
    let mean_recipe = recipes
        .iter()
        .fold(DVector::zeros(ctx.input_dim()), |acc, u| acc + u)
        / n as f64;
    let (output_mean, output_cov) = sample_covariance(&outputs);
    Ok(ConvergedBatch {
        recipes,
        outputs,
        mean_recipe,
        output_mean,
        output_cov,
        search_iterations: outcome.iterations,
        converged: outcome.converged,
    })
}

/// One run of the offline memory buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineRecord {
    pub cycle: usize,
    pub run_index: usize,
    pub recipe: ControlRecipe,
    pub output: ProcessOutput,
    /// Belief the recipe was chosen against.
    pub prior: GaussianBelief,
    pub posterior: GaussianBelief,
}

/// Everything produced by one offline production cycle.
#[derive(Debug, Clone)]
pub struct CycleOutcome {
    pub records: Vec<OfflineRecord>,
    pub runs: Vec<RunRecord>,
    /// Hidden disturbances, for diagnostics.
    pub disturbances: Vec<DVector<f64>>,
    /// Number of runs whose search hit the iteration budget.
    pub unconverged_searches: usize,
}

impl CycleOutcome {
    pub fn mcc(&self) -> Result<f64> {
        crate::cost::mcc(&self.runs.iter().map(|r| r.cost).collect::<Vec<_>>())
    }
}

/// Disturbance and search keys of offline cycle `cycle` under `root`.
pub fn phase1_keys(root: StreamKey, cycle: usize) -> (StreamKey, StreamKey) {
    (root.path(&[0, cycle as u64]), root.path(&[1, cycle as u64]))
}

/// One offline cycle of `horizon` runs: search under the prior, run the line,
/// update and propagate the belief.
pub fn run_phase1_cycle(
    ctx: &SearchContext<'_>,
    model: &DisturbanceModel,
    belief_cfg: &BeliefConfig,
    horizon: usize,
    cycle: usize,
    disturbance_key: StreamKey,
    search_key: StreamKey,
) -> Result<CycleOutcome> {
    if horizon == 0 {
        return Err(Error::Contract("horizon must be at least one run".into()));
    }
    check_dim("belief", ctx.output_dim(), belief_cfg.initial_prior.dim())?;
    let mut line = SimulatedLine::new(ctx.plant, model, disturbance_key)?;
    let mut prior = belief_cfg.initial_prior.clone();
    let mut u = ctx.initial_recipe.clone();
    let mut out = CycleOutcome {
        records: Vec::with_capacity(horizon),
        runs: Vec::with_capacity(horizon),
        disturbances: Vec::new(),
        unconverged_searches: 0,
    };
    for t in 1..=horizon {
        let mut rng = search_key.child(t as u64).rng();
        let batch = control_search(ctx, t, &prior, &u, &mut rng)?;
        if !batch.converged {
            out.unconverged_searches += 1;
        }
        let recipe = ControlRecipe::new(batch.mean_recipe.clone())?;
        let run = execute_run(&mut line, &recipe, t, &ctx.weights, &ctx.target)?;
        let observed = ProcessOutput::new(run.output.clone())?;
        let posterior = posterior_update(&prior, &batch, &observed, belief_cfg.obs_cov)?;
        out.records.push(OfflineRecord {
            cycle,
            run_index: t,
            recipe,
            output: observed,
            prior: prior.clone(),
            posterior: posterior.clone(),
        });
        out.runs.push(run);
        prior = propagate_prior(&posterior, &belief_cfg.process_noise)?;
        u = batch.mean_recipe;
    }
    out.disturbances = line.disturbance_history().to_vec();
    Ok(out)
}

/// Runs `cycles` offline cycles sequentially with keys derived from `root`.
pub fn run_phase1(
    ctx: &SearchContext<'_>,
    model: &DisturbanceModel,
    belief_cfg: &BeliefConfig,
    horizon: usize,
    cycles: usize,
    root: StreamKey,
) -> Result<Vec<CycleOutcome>> {
    if cycles == 0 {
        return Err(Error::Contract("at least one offline cycle is required".into()));
    }
    (0..cycles)
        .map(|c| {
            let (dk, sk) = phase1_keys(root, c);
            run_phase1_cycle(ctx, model, belief_cfg, horizon, c, dk, sk)
        })
        .collect()
}

/// First line of a buffer file.
pub const BUFFER_HEADER: &str = "# mfrl-buffer v1";

fn buffer_columns(m: usize, n: usize) -> Vec<String> {
    let mut cols = vec!["cycle".to_string(), "t".to_string()];
    cols.extend((1..=m).map(|i| format!("u{i}")));
    cols.extend((1..=n).map(|i| format!("y{i}")));
    for prefix in ["prior", "post"] {
        cols.extend((1..=n).map(|i| format!("{prefix}_mean{i}")));
        for i in 1..=n {
            cols.extend((1..=n).map(|j| format!("{prefix}_cov{i}{j}")));
        }
    }
    cols
}

/// Writes records as comma-separated decimal text with a versioned header.
/// Floats use the shortest representation that parses back to the same bits.
pub fn write_records<W: Write>(mut w: W, records: &[OfflineRecord]) -> Result<()> {
    let first = records
        .first()
        .ok_or_else(|| Error::Contract("refusing to write an empty buffer".into()))?;
    let (m, n) = (first.recipe.dim(), first.output.dim());
    writeln!(w, "{BUFFER_HEADER}")?;
    writeln!(w, "{}", buffer_columns(m, n).join(","))?;
    let mut line = String::new();
    for r in records {
        check_dim("record recipe", m, r.recipe.dim())?;
        check_dim("record output", n, r.output.dim())?;
        line.clear();
        write!(line, "{},{}", r.cycle, r.run_index).unwrap();
        let prior_cov = r.prior.cov().transpose();
        let post_cov = r.posterior.cov().transpose();
        let values = r
            .recipe
            .values()
            .iter()
            .chain(r.output.values().iter())
            .chain(r.prior.mean().iter())
            .chain(prior_cov.iter())
            .chain(r.posterior.mean().iter())
            .chain(post_cov.iter());
        for v in values {
            write!(line, ",{v}").unwrap();
        }
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

/// Reads a buffer file written by [`write_records`].
pub fn read_records<R: BufRead>(r: R) -> Result<Vec<OfflineRecord>> {
    let mut lines = r.lines().enumerate();
    let header = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty buffer file"))?
        .1?;
    if header.trim_end() != BUFFER_HEADER {
        return Err(parse_err(1, format!("expected '{BUFFER_HEADER}', found '{header}'")));
    }
    let columns = lines
        .next()
        .ok_or_else(|| parse_err(2, "missing column header"))?
        .1?;
    let names: Vec<&str> = columns.trim_end().split(',').collect();
    let m = names.iter().filter(|c| c.starts_with('u')).count();
    let n = names.iter().filter(|c| c.starts_with('y')).count();
    let expected = buffer_columns(m, n);
    if names != expected {
        return Err(parse_err(2, format!("unexpected columns '{columns}'")));
    }
    let mut records = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        if fields.len() != expected.len() {
            return Err(parse_err(
                lineno,
                format!("expected {} fields, found {}", expected.len(), fields.len()),
            ));
        }
        let cycle: usize = fields[0]
            .parse()
            .map_err(|e| parse_err(lineno, format!("cycle: {e}")))?;
        let run_index: usize = fields[1]
            .parse()
            .map_err(|e| parse_err(lineno, format!("t: {e}")))?;
        let nums = fields[2..]
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| parse_err(lineno, e.to_string()))?;
        let mut pos = 0;
        let mut take = |k: usize| {
            let s = &nums[pos..pos + k];
            pos += k;
            s.to_vec()
        };
        let recipe = ControlRecipe::from_slice(&take(m))
            .map_err(|e| parse_err(lineno, e.to_string()))?;
        let output = ProcessOutput::from_slice(&take(n))
            .map_err(|e| parse_err(lineno, e.to_string()))?;
        let mut belief = || {
            let mean = DVector::from_vec(take(n));
            let cov = DMatrix::from_row_slice(n, n, &take(n * n));
            GaussianBelief::new(mean, cov).map_err(|e| parse_err(lineno, e.to_string()))
        };
        let prior = belief()?;
        let posterior = belief()?;
        records.push(OfflineRecord {
            cycle,
            run_index,
            recipe,
            output,
            prior,
            posterior,
        });
    }
    Ok(records)
}

pub fn save_buffer(path: &Path, records: &[OfflineRecord]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_records(std::io::BufWriter::new(file), records)
}

pub fn load_buffer(path: &Path) -> Result<Vec<OfflineRecord>> {
    let file = std::fs::File::open(path)?;
    read_records(std::io::BufReader::new(file))
}
