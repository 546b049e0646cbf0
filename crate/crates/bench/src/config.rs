//! Flat `key = value` experiment configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use mfrl_core::bayes::ObsCovConvention;
use mfrl_core::online::{KlOrder, MatchBelief, MatchScope, MatchSettings};
use mfrl_core::SgdConfig;

use crate::BenchError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DisturbanceKind {
    Ima11,
    Zero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub target: Vec<f64>,
    pub horizon: usize,
    pub disturbance: DisturbanceKind,
    pub ima_theta: Vec<f64>,
    pub ima_innovation_std: Vec<f64>,
    pub q_diag: Vec<f64>,
    pub r_diag: Vec<f64>,
    pub sgd: SgdConfig,
    pub initial_recipe: Vec<f64>,
    pub recipe_lower: f64,
    pub recipe_upper: f64,
    pub cycles: usize,
    pub design_cycles: usize,
    pub replications: usize,
    pub seed: u64,
    /// Worker threads; 0 uses every available core.
    pub workers: usize,
    pub out_dir: PathBuf,
    /// Buffer read by `phase2`; defaults to `<out_dir>/buffer.csv`.
    pub buffer_path: Option<PathBuf>,
    pub obs_cov: ObsCovConvention,
    pub matching: MatchSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            target: vec![2200.0, 400.0],
            horizon: 50,
            disturbance: DisturbanceKind::Ima11,
            ima_theta: vec![0.2, 0.2],
            ima_innovation_std: vec![30.0, 10.0],
            q_diag: vec![1.0, 1.0],
            r_diag: vec![0.0, 0.0, 0.0],
            sgd: SgdConfig {
                step_size: 3e-8,
                probe_radius: 0.05,
                convergence_tol: 1e-6,
                max_iters: 500,
                averaging_window: 50,
            },
            initial_recipe: vec![1.0, 1.0, 1.0],
            recipe_lower: -2.0,
            recipe_upper: 2.0,
            cycles: 50,
            design_cycles: 1000,
            replications: 20,
            seed: 1,
            workers: 0,
            out_dir: PathBuf::from("results"),
            buffer_path: None,
            obs_cov: ObsCovConvention::SampleMean,
            matching: MatchSettings::default(),
        }
    }
}

fn list(key: &str, v: &str) -> Result<Vec<f64>, String> {
    v.split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| format!("{key}: {e}")))
        .collect()
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("{key}: {e}"))
}

impl ExperimentConfig {
    /// Parses config text; keys not set keep their defaults.
    pub fn parse(text: &str) -> Result<Self, BenchError> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| BenchError::Config {
                line: line_no,
                msg: format!("expected 'key = value', found '{line}'"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if let Some(prev) = seen.insert(key.to_string(), line_no) {
                return Err(BenchError::Config {
                    line: line_no,
                    msg: format!("'{key}' already set on line {prev}"),
                });
            }
            cfg.set(key, value).map_err(|msg| BenchError::Config { line: line_no, msg })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, BenchError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BenchError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        match key {
            "plant" => {
                if v != "cmp" {
                    return Err(format!("unknown plant '{v}' (supported: cmp)"));
                }
            }
            "target" => self.target = list(key, v)?,
            "horizon" => self.horizon = num(key, v)?,
            "disturbance" => {
                self.disturbance = match v {
                    "ima11" => DisturbanceKind::Ima11,
                    "zero" => DisturbanceKind::Zero,
                    _ => return Err(format!("unknown disturbance '{v}' (ima11 | zero)")),
                }
            }
            "ima.theta" => self.ima_theta = list(key, v)?,
            "ima.innovation_std" => self.ima_innovation_std = list(key, v)?,
            "cost.q" => self.q_diag = list(key, v)?,
            "cost.r" => self.r_diag = list(key, v)?,
            "sgd.step_size" => self.sgd.step_size = num(key, v)?,
            "sgd.probe_radius" => self.sgd.probe_radius = num(key, v)?,
            "sgd.convergence_tol" => self.sgd.convergence_tol = num(key, v)?,
            "sgd.max_iters" => self.sgd.max_iters = num(key, v)?,
            "sgd.averaging_window" => self.sgd.averaging_window = num(key, v)?,
            "search.initial_recipe" => self.initial_recipe = list(key, v)?,
            "recipe_box" => {
                let b = list(key, v)?;
                if b.len() != 2 {
                    return Err("recipe_box takes 'lower, upper'".into());
                }
                self.recipe_lower = b[0];
                self.recipe_upper = b[1];
            }
            "phase1.cycles" => self.cycles = num(key, v)?,
            "apc.design_cycles" => self.design_cycles = num(key, v)?,
            "replications" => self.replications = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "workers" => self.workers = num(key, v)?,
            "out" => self.out_dir = PathBuf::from(v),
            "buffer.path" => self.buffer_path = Some(PathBuf::from(v)),
            "belief.obs_cov" => {
                self.obs_cov = match v {
                    "sample_mean" => ObsCovConvention::SampleMean,
                    "scaled" => ObsCovConvention::Scaled,
                    _ => return Err(format!("unknown obs_cov '{v}' (sample_mean | scaled)")),
                }
            }
            "match.belief" => {
                self.matching.belief = match v {
                    "prior" => MatchBelief::Prior,
                    "posterior" => MatchBelief::Posterior,
                    _ => return Err(format!("unknown match.belief '{v}' (prior | posterior)")),
                }
            }
            "match.kl_order" => {
                self.matching.order = match v {
                    "record_online" => KlOrder::RecordOnline,
                    "online_record" => KlOrder::OnlineRecord,
                    _ => {
                        return Err(format!(
                            "unknown match.kl_order '{v}' (record_online | online_record)"
                        ))
                    }
                }
            }
            "match.scope" => {
                self.matching.scope = match v {
                    "run" => MatchScope::SameRun,
                    "all" => MatchScope::All,
                    _ => return Err(format!("unknown match.scope '{v}' (run | all)")),
                }
            }
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    /// Checks ranges and that referenced files exist.
    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |msg: String| Err(BenchError::Invalid(msg));
        if self.replications == 0 {
            return bad("replications must be at least 1".into());
        }
        if self.horizon == 0 {
            return bad("horizon must be at least 1".into());
        }
        if self.cycles == 0 || self.design_cycles < 2 {
            return bad("phase1.cycles must be >= 1 and apc.design_cycles >= 2".into());
        }
        if self.target.len() != 2 || self.q_diag.len() != 2 {
            return bad("the CMP plant has two outputs: target and cost.q need 2 values".into());
        }
        if self.r_diag.len() != 3 || self.initial_recipe.len() != 3 {
            return bad("the CMP plant has three inputs: cost.r and search.initial_recipe need 3 values".into());
        }
        if self.disturbance == DisturbanceKind::Ima11
            && (self.ima_theta.len() != 2 || self.ima_innovation_std.len() != 2)
        {
            return bad("ima.theta and ima.innovation_std need 2 values".into());
        }
        if let Some(p) = &self.buffer_path {
            if !p.exists() {
                return bad(format!("buffer file {} does not exist", p.display()));
            }
        }
        self.sgd
            .validate()
            .map_err(|e| BenchError::Invalid(e.to_string()))
    }

    pub fn has_recipe_penalty(&self) -> bool {
        self.r_diag.iter().any(|&r| r != 0.0)
    }

    pub fn buffer_file(&self) -> PathBuf {
        self.buffer_path
            .clone()
            .unwrap_or_else(|| self.out_dir.join("buffer.csv"))
    }
}
