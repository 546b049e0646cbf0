//! Replicated experiments on the CMP plant.
//!
//! Every random stream is derived from the master seed by index: the online
//! disturbance of replication `i` from `[1, i]`, the basic controller's search
//! from `[2, i]`, the offline cycles from `[3]` and the DOE design data from
//! `[4]`. Replications run on a worker pool and are gathered by index, so the
//! output does not depend on the number of workers.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use mfrl_core::controller::{run_basic_mfrl, run_no_control, RunRecord, SearchContext, Trajectory};
use mfrl_core::doe::{generate_design_data, run_apc_controller, ApcModel};
use mfrl_core::online::{run_phase2, MemoryBuffer, Phase2Config};
use mfrl_core::phase1::{load_buffer, phase1_keys, run_phase1_cycle, save_buffer, BeliefConfig, CycleOutcome, OfflineRecord};
use mfrl_core::{CmpPlant, CostWeights, DisturbanceModel, RecipeBox, StreamKey};

use crate::config::{DisturbanceKind, ExperimentConfig};
use crate::report::{write_summary, RMode, SummaryRow};
use crate::{BenchError, Result};

/// First line of a per-run trajectory file.
pub const RUNS_HEADER: &str = "# mfrl-runs v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Controller {
    NoControl,
    Basic,
    Phase1,
    Phase2,
    Apc,
}

impl Controller {
    pub fn name(self) -> &'static str {
        match self {
            Controller::NoControl => "nocontrol",
            Controller::Basic => "basic",
            Controller::Phase1 => "phase1",
            Controller::Phase2 => "phase2",
            Controller::Apc => "apc",
        }
    }
}

/// A controller that runs once per replication.
#[derive(Clone, Copy)]
pub enum Online<'a> {
    NoControl,
    Basic,
    Phase2(&'a MemoryBuffer),
    Apc(&'a ApcModel),
}

pub struct Experiment {
    pub cfg: ExperimentConfig,
    plant: CmpPlant,
    model: DisturbanceModel,
    weights: CostWeights,
    target: DVector<f64>,
    bounds: RecipeBox,
    pool: rayon::ThreadPool,
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let model = match cfg.disturbance {
            DisturbanceKind::Ima11 => DisturbanceModel::ima11(&cfg.ima_theta, &cfg.ima_innovation_std)?,
            DisturbanceKind::Zero => DisturbanceModel::Zero { dim: 2 },
        };
        let weights = CostWeights::new(
            DMatrix::from_diagonal(&DVector::from_column_slice(&cfg.q_diag)),
            DMatrix::from_diagonal(&DVector::from_column_slice(&cfg.r_diag)),
        )?;
        let bounds = RecipeBox::new(cfg.recipe_lower, cfg.recipe_upper)?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| BenchError::Invalid(format!("worker pool: {e}")))?;
        Ok(Experiment {
            plant: CmpPlant::standard(),
            model,
            weights,
            target: DVector::from_column_slice(&cfg.target),
            bounds,
            pool,
            cfg,
        })
    }

    pub fn plant(&self) -> &CmpPlant {
        &self.plant
    }

    pub fn disturbance(&self) -> &DisturbanceModel {
        &self.model
    }

    fn master(&self) -> StreamKey {
        StreamKey::new(self.cfg.seed)
    }

    fn r_mode(&self) -> RMode {
        if self.cfg.has_recipe_penalty() {
            RMode::Nonzero
        } else {
            RMode::Zero
        }
    }

    pub fn search_context(&self) -> Result<SearchContext<'_>> {
        let ctx = SearchContext::new(
            &self.plant,
            self.target.clone(),
            self.weights.clone(),
            self.cfg.sgd,
            self.bounds,
        )?
        .with_initial_recipe(DVector::from_column_slice(&self.cfg.initial_recipe))?;
        Ok(ctx)
    }

    pub fn belief_config(&self) -> Result<BeliefConfig> {
        Ok(BeliefConfig::from_model(&self.model, self.cfg.obs_cov)?)
    }

    fn par_indexed<T: Send>(&self, n: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
        self.pool.install(|| (0..n).into_par_iter().map(f).collect())
    }

    /// Runs the configured number of offline cycles in parallel.
    pub fn phase1_cycles(&self, cycles: usize) -> Result<Vec<CycleOutcome>> {
        let ctx = self.search_context()?;
        let bcfg = self.belief_config()?;
        let root = self.master().child(3);
        self.par_indexed(cycles, |c| {
            let (dk, sk) = phase1_keys(root, c);
            Ok(run_phase1_cycle(&ctx, &self.model, &bcfg, self.cfg.horizon, c, dk, sk)?)
        })
    }

    pub fn memory_buffer(&self, records: Vec<OfflineRecord>) -> Result<MemoryBuffer> {
        Ok(MemoryBuffer::new(records, self.cfg.matching.belief)?)
    }

    pub fn phase2_config(&self, buffer: &MemoryBuffer) -> Result<Phase2Config> {
        Ok(Phase2Config {
            matching: self.cfg.matching,
            belief: self.belief_config()?,
            obs_cov: buffer.observation_cov()?,
        })
    }

    /// Fits the DOE model on freshly simulated design cycles.
    pub fn fit_apc(&self) -> Result<ApcModel> {
        let data = generate_design_data(
            &self.plant,
            &self.model,
            &self.target,
            self.cfg.horizon,
            self.cfg.design_cycles,
            self.master().child(4),
        )?;
        Ok(ApcModel::fit(&data)?)
    }

    /// One trajectory per replication.
    pub fn replicate(&self, controller: Online<'_>) -> Result<Vec<Trajectory>> {
        let ctx = self.search_context()?;
        let p2 = match controller {
            Online::Phase2(buffer) => Some(self.phase2_config(buffer)?),
            _ => None,
        };
        let master = self.master();
        let horizon = self.cfg.horizon;
        self.par_indexed(self.cfg.replications, |i| {
            let dk = master.path(&[1, i as u64]);
            let tr = match controller {
                Online::NoControl => run_no_control(&self.plant, &self.model, &self.target, &self.weights, horizon, dk)?,
                Online::Basic => run_basic_mfrl(&ctx, &self.model, horizon, dk, master.path(&[2, i as u64]))?,
                Online::Phase2(buffer) => run_phase2(
                    buffer,
                    &self.plant,
                    &self.model,
                    &self.target,
                    &self.weights,
                    horizon,
                    p2.as_ref().expect("phase2 config"),
                    dk,
                )?,
                Online::Apc(model) => run_apc_controller(
                    model,
                    &self.plant,
                    &self.model,
                    &self.target,
                    &self.weights,
                    horizon,
                    &self.bounds,
                    dk,
                )?,
            };
            Ok(tr)
        })
    }

    fn out_file(&self, name: &str) -> PathBuf {
        self.cfg.out_dir.join(name)
    }

    /// Runs `controller`, writes its trajectories and summary under the output
    /// directory and returns the summary row.
    pub fn run(&self, controller: Controller) -> Result<SummaryRow> {
        fs::create_dir_all(&self.cfg.out_dir)?;
        let trajectories = match controller {
            Controller::Phase1 => {
                let cycles = self.phase1_cycles(self.cfg.cycles)?;
                let records: Vec<OfflineRecord> = cycles.iter().flat_map(|c| c.records.iter().cloned()).collect();
                save_buffer(&self.out_file("buffer.csv"), &records)?;
                cycles.into_iter().map(|c| Trajectory { runs: c.runs }).collect()
            }
            Controller::NoControl => self.replicate(Online::NoControl)?,
            Controller::Basic => self.replicate(Online::Basic)?,
            Controller::Phase2 => {
                let path = self.cfg.buffer_file();
                if !path.exists() {
                    return Err(BenchError::Invalid(format!(
                        "buffer file {} does not exist; run phase1 first or set buffer.path",
                        path.display()
                    )));
                }
                let buffer = self.memory_buffer(load_buffer(&path)?)?;
                self.replicate(Online::Phase2(&buffer))?
            }
            Controller::Apc => {
                let model = self.fit_apc()?;
                let mut f = fs::File::create(self.out_file("apc_model.txt"))?;
                model.write_text(&mut f)?;
                self.replicate(Online::Apc(&model))?
            }
        };
        let mccs = trajectories.iter().map(|t| t.mcc()).collect::<mfrl_core::Result<Vec<_>>>()?;
        let row = SummaryRow::from_mccs(controller.name(), self.r_mode(), &mccs);
        write_runs(&self.out_file(&format!("{}_runs.csv", controller.name())), &trajectories)?;
        write_summary(&self.out_file(&format!("{}_summary.csv", controller.name())), std::slice::from_ref(&row))?;
        Ok(row)
    }
}

fn push_opt<T: std::fmt::Display>(s: &mut String, v: Option<T>) {
    if let Some(v) = v {
        write!(s, "{v}").unwrap();
    }
    s.push(',');
}

fn runs_text(trajectories: &[Trajectory]) -> String {
    let first: Option<&RunRecord> = trajectories.iter().find_map(|t| t.runs.first());
    let (m, n) = first.map_or((0, 0), |r| (r.recipe.len(), r.output.len()));
    let mut s = format!("{RUNS_HEADER}\nreplication,t,matched_record_id,kl");
    (1..=m).for_each(|i| write!(s, ",u{i}").unwrap());
    (1..=n).for_each(|i| write!(s, ",y{i}").unwrap());
    s.push_str(",cost\n");
    for (rep, tr) in trajectories.iter().enumerate() {
        for r in &tr.runs {
            write!(s, "{rep},{},", r.t).unwrap();
            push_opt(&mut s, r.matched_record);
            push_opt(&mut s, r.kl);
            for v in r.recipe.iter().chain(r.output.iter()) {
                write!(s, "{v},").unwrap();
            }
            writeln!(s, "{}", r.cost).unwrap();
        }
    }
    s
}

/// Writes every run of every replication as CSV.
pub fn write_runs(path: &Path, trajectories: &[Trajectory]) -> Result<()> {
    fs::write(path, runs_text(trajectories))?;
    Ok(())
}
