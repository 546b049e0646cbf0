//! Online control by replaying the offline memory buffer.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::bayes::{fuse, propagate_prior, GaussianBelief};
use crate::controller::{execute_run, Trajectory};
use crate::cost::CostWeights;
use crate::error::{check_dim, Error, Result};
use crate::linalg::{spd_inverse, spd_log_det, symmetrize};
use crate::phase1::{BeliefConfig, OfflineRecord};
use crate::plant::{DisturbanceModel, Plant, SimulatedLine};
use crate::rng::StreamKey;

/// `KL(p ‖ q)` between two Gaussians.
pub fn kl_gaussian(p: &GaussianBelief, q: &GaussianBelief) -> Result<f64> {
    check_dim("KL operands", p.dim(), q.dim())?;
    if p == q {
        return Ok(0.0);
    }
    let q_inv = spd_inverse("KL reference covariance", q.cov())?;
    let ld_p = spd_log_det("KL covariance", p.cov())?;
    let ld_q = spd_log_det("KL reference covariance", q.cov())?;
    let diff = q.mean() - p.mean();
    let n = p.dim() as f64;
    let tr = (&q_inv * p.cov()).trace();
    let quad = (&q_inv * &diff).dot(&diff);
    Ok(0.5 * (tr + quad - n + ld_q - ld_p))
}

/// Which stored belief stands for the record's disturbance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MatchBelief {
    /// The belief the recipe was chosen against.
    #[default]
    Prior,
    Posterior,
}

/// Argument order of the divergence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KlOrder {
    /// `KL(record ‖ online)`.
    #[default]
    RecordOnline,
    /// `KL(online ‖ record)`.
    OnlineRecord,
}

/// Which records are candidates for run `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MatchScope {
    /// Only records of the same run index.
    #[default]
    SameRun,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MatchSettings {
    pub belief: MatchBelief,
    pub order: KlOrder,
    pub scope: MatchScope,
}

struct IndexEntry {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    inv: DMatrix<f64>,
    log_det: f64,
}

/// Immutable archive of offline records with a precomputed matching index.
pub struct MemoryBuffer {
    records: Vec<OfflineRecord>,
    index: Vec<IndexEntry>,
    by_run: BTreeMap<usize, Vec<usize>>,
    belief: MatchBelief,
}

/// Result of a buffer lookup.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub record: usize,
    pub kl: f64,
}

impl MemoryBuffer {
    pub fn new(records: Vec<OfflineRecord>, belief: MatchBelief) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| Error::Contract("memory buffer must not be empty".into()))?;
        let n = first.output.dim();
        let mut index = Vec::with_capacity(records.len());
        let mut by_run: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            check_dim("record belief", n, r.prior.dim())?;
            check_dim("record belief", n, r.posterior.dim())?;
            let b = match belief {
                MatchBelief::Prior => &r.prior,
                MatchBelief::Posterior => &r.posterior,
            };
            index.push(IndexEntry {
                mean: b.mean().clone(),
                cov: b.cov().clone(),
                inv: spd_inverse("record belief covariance", b.cov())?,
                log_det: spd_log_det("record belief covariance", b.cov())?,
            });
            by_run.entry(r.run_index).or_default().push(i);
        }
        Ok(MemoryBuffer {
            records,
            index,
            by_run,
            belief,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[OfflineRecord] {
        &self.records
    }

    pub fn record(&self, i: usize) -> &OfflineRecord {
        &self.records[i]
    }

    pub fn match_belief(&self) -> MatchBelief {
        self.belief
    }

    /// Observation covariance implied by the stored updates, averaged over the
    /// buffer: each record satisfies `Σ_post⁻¹ = Σ_prior⁻¹ + Σ_obs⁻¹`.
    pub fn observation_cov(&self) -> Result<DMatrix<f64>> {
        let n = self.records[0].output.dim();
        let mut acc = DMatrix::zeros(n, n);
        for r in &self.records {
            let info = spd_inverse("posterior covariance", r.posterior.cov())?
                - spd_inverse("prior covariance", r.prior.cov())?;
            acc += spd_inverse("observation information", &symmetrize(&info))?;
        }
        Ok(symmetrize(&(acc / self.records.len() as f64)))
    }

    /// Record minimizing the divergence to `online`; ties go to the lowest index.
    pub fn match_record(
        &self,
        online: &GaussianBelief,
        t: usize,
        settings: &MatchSettings,
    ) -> Result<Match> {
        check_dim("online belief", self.index[0].mean.len(), online.dim())?;
        let n = online.dim() as f64;
        let q_inv = spd_inverse("online belief covariance", online.cov())?;
        let q_ld = spd_log_det("online belief covariance", online.cov())?;
        let score = |i: usize| -> f64 {
            let e = &self.index[i];
            if &e.mean == online.mean() && &e.cov == online.cov() {
                return 0.0;
            }
            let diff = online.mean() - &e.mean;
            match settings.order {
                KlOrder::RecordOnline => {
                    let tr = q_inv.component_mul(&e.cov).sum();
                    0.5 * (tr + (&q_inv * &diff).dot(&diff) - n + q_ld - e.log_det)
                }
                KlOrder::OnlineRecord => {
                    let tr = e.inv.component_mul(online.cov()).sum();
                    0.5 * (tr + (&e.inv * &diff).dot(&diff) - n + e.log_det - q_ld)
                }
            }
        };
        let mut best: Option<Match> = None;
        let mut consider = |i: usize| {
            let kl = score(i);
            if best.is_none_or(|b| kl < b.kl) {
                best = Some(Match { record: i, kl });
            }
        };
        match settings.scope {
            MatchScope::All => (0..self.len()).for_each(&mut consider),
            MatchScope::SameRun => self
                .by_run
                .get(&t)
                .ok_or_else(|| Error::Contract(format!("memory buffer has no records for run {t}")))?
                .iter()
                .copied()
                .for_each(&mut consider),
        }
        let best = best.expect("candidate set is nonempty");
        if !best.kl.is_finite() {
            return Err(Error::Numeric(format!("divergence evaluated to {}", best.kl)));
        }
        Ok(best)
    }
}

/// Settings of the online controller.
#[derive(Debug, Clone, PartialEq)]
pub struct Phase2Config {
    pub matching: MatchSettings,
    pub belief: BeliefConfig,
    /// Held constant over the cycle; usually [`MemoryBuffer::observation_cov`].
    pub obs_cov: DMatrix<f64>,
}

/// One online cycle: match, replay, observe, update the online belief.
#[allow(clippy::too_many_arguments)]
pub fn run_phase2(
    buffer: &MemoryBuffer,
    plant: &dyn Plant,
    model: &DisturbanceModel,
    target: &DVector<f64>,
    weights: &CostWeights,
    horizon: usize,
    cfg: &Phase2Config,
    disturbance_key: StreamKey,
) -> Result<Trajectory> {
    if horizon == 0 {
        return Err(Error::Contract("horizon must be at least one run".into()));
    }
    check_dim("buffer recipes", plant.input_dim(), buffer.record(0).recipe.dim())?;
    let mut line = SimulatedLine::new(plant, model, disturbance_key)?;
    let mut belief = cfg.belief.initial_prior.clone();
    let mut runs = Vec::with_capacity(horizon);
    for t in 1..=horizon {
        let m = buffer.match_record(&belief, t, &cfg.matching)?;
        let rec = buffer.record(m.record);
        let mut run = execute_run(&mut line, &rec.recipe, t, weights, target)?;
        let g_hat = rec.output.values() - rec.posterior.mean();
        let s = &run.output - g_hat;
        let posterior = fuse(&belief, &s, &cfg.obs_cov)?;
        belief = propagate_prior(&posterior, &cfg.belief.process_noise)?;
        run.matched_record = Some(m.record);
        run.kl = Some(m.kl);
        runs.push(run);
    }
    Ok(Trajectory { runs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::{ControlRecipe, ProcessOutput};
    use proptest::prelude::*;

    fn record(t: usize, belief: GaussianBelief) -> OfflineRecord {
        OfflineRecord {
            cycle: 0,
            run_index: t,
            recipe: ControlRecipe::from_slice(&[0.0]).unwrap(),
            output: ProcessOutput::new(belief.mean().clone()).unwrap(),
            prior: belief.clone(),
            posterior: belief,
        }
    }

    #[test]
    fn kl_examples() {
        let p = GaussianBelief::scalar(0.0, 1.0).unwrap();
        let q = GaussianBelief::scalar(1.0, 1.0).unwrap();
        assert_eq!(kl_gaussian(&p, &p).unwrap(), 0.0);
        assert!((kl_gaussian(&p, &q).unwrap() - 0.5).abs() < 1e-12);
        // N(0, 1) ‖ N(0, 4): ½(1/4 − 1 + ln 4)
        let w = GaussianBelief::scalar(0.0, 4.0).unwrap();
        let expected = 0.5 * (0.25 - 1.0 + 4f64.ln());
        assert!((kl_gaussian(&p, &w).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn kl_rejects_singular() {
        let p = GaussianBelief::scalar(0.0, 1.0).unwrap();
        let z = GaussianBelief::point(DVector::zeros(1));
        assert!(matches!(kl_gaussian(&p, &z), Err(Error::Numeric(_))));
    }

    #[test]
    fn match_examples() {
        let settings = MatchSettings::default();
        let a = GaussianBelief::scalar(0.0, 1.0).unwrap();
        let b = GaussianBelief::scalar(5.0, 1.0).unwrap();
        let buf = MemoryBuffer::new(vec![record(1, a.clone()), record(1, b.clone())], MatchBelief::Prior)
            .unwrap();
        let online = GaussianBelief::scalar(4.9, 1.0).unwrap();
        assert_eq!(buf.match_record(&online, 1, &settings).unwrap().record, 1);
        let m = buf.match_record(&a, 1, &settings).unwrap();
        assert_eq!((m.record, m.kl), (0, 0.0));

        let single = MemoryBuffer::new(vec![record(1, b)], MatchBelief::Prior).unwrap();
        assert_eq!(single.match_record(&online, 1, &settings).unwrap().record, 0);
        assert!(single.match_record(&online, 2, &settings).is_err());
        let all = MatchSettings {
            scope: MatchScope::All,
            ..settings
        };
        assert_eq!(single.match_record(&online, 2, &all).unwrap().record, 0);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let a = GaussianBelief::scalar(1.0, 1.0).unwrap();
        let b = GaussianBelief::scalar(-1.0, 1.0).unwrap();
        let buf = MemoryBuffer::new(vec![record(1, a), record(1, b)], MatchBelief::Prior).unwrap();
        let online = GaussianBelief::scalar(0.0, 1.0).unwrap();
        assert_eq!(buf.match_record(&online, 1, &MatchSettings::default()).unwrap().record, 0);
    }

    #[test]
    fn empty_buffer_rejected() {
        assert!(MemoryBuffer::new(Vec::new(), MatchBelief::Prior).is_err());
    }

    #[test]
    fn observation_cov_recovers_fusion_noise() {
        let prior = GaussianBelief::new(DVector::zeros(2), DMatrix::identity(2, 2) * 3.0).unwrap();
        let obs = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let post = fuse(&prior, &DVector::from_vec(vec![1.0, 1.0]), &obs).unwrap();
        let mut r = record(1, prior.clone());
        r.posterior = post;
        r.output = ProcessOutput::from_slice(&[0.0, 0.0]).unwrap();
        r.recipe = ControlRecipe::from_slice(&[0.0]).unwrap();
        let buf = MemoryBuffer::new(vec![r], MatchBelief::Prior).unwrap();
        assert!((buf.observation_cov().unwrap() - obs).amax() < 1e-10);
    }

    fn random_belief(v: &[f64]) -> GaussianBelief {
        let a = DMatrix::from_row_slice(2, 2, &v[2..6]);
        let cov = &a * a.transpose() + DMatrix::identity(2, 2) * 0.05;
        GaussianBelief::new(DVector::from_row_slice(&v[0..2]), cov).unwrap()
    }

    #[test]
    fn indexed_scan_agrees_with_direct_evaluation() {
        let mut rng = crate::rng::StreamKey::new(21).rng();
        let mut draw = || {
            let v: Vec<f64> = (0..6).map(|_| rand::Rng::random_range(&mut rng, -3.0..3.0)).collect();
            random_belief(&v)
        };
        let records: Vec<OfflineRecord> = (0..500).map(|_| record(1, draw())).collect();
        for order in [KlOrder::RecordOnline, KlOrder::OnlineRecord] {
            let settings = MatchSettings {
                order,
                ..MatchSettings::default()
            };
            let buf = MemoryBuffer::new(records.clone(), MatchBelief::Prior).unwrap();
            for _ in 0..20 {
                let online = draw();
                let m = buf.match_record(&online, 1, &settings).unwrap();
                let direct: Vec<f64> = records
                    .iter()
                    .map(|r| match order {
                        KlOrder::RecordOnline => kl_gaussian(&r.prior, &online).unwrap(),
                        KlOrder::OnlineRecord => kl_gaussian(&online, &r.prior).unwrap(),
                    })
                    .collect();
                assert!((direct[m.record] - m.kl).abs() < 1e-9 * (1.0 + m.kl));
                assert!(direct.iter().all(|&k| k >= m.kl - 1e-9 * (1.0 + m.kl)));
            }
        }
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative(
            p in prop::collection::vec(-3.0f64..3.0, 6),
            q in prop::collection::vec(-3.0f64..3.0, 6),
        ) {
            let (p, q) = (random_belief(&p), random_belief(&q));
            prop_assert!(kl_gaussian(&p, &q).unwrap() >= 0.0);
        }
    }
}
