//! DOE regression baseline: dynamic linear fit, fixed-structure DOE model and
//! the uncertainty-aware closed-form recipe.

use std::fmt::Write as _;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::controller::{execute_run, Trajectory};
use crate::cost::CostWeights;
use crate::error::{check_dim, Error, Result};
use crate::linalg::symmetrize;
use crate::ols::ols;
use crate::plant::{ControlRecipe, DisturbanceModel, Plant, ProcessLine, RecipeBox, SimulatedLine};
use crate::rng::StreamKey;

/// One offline cycle: recipes and deviations `z_t = y_t − y*` for runs `1..=T`.
/// The output before the first run is on target (`z_0 = 0`).
#[derive(Debug, Clone, PartialEq)]
pub struct DoeTrajectory {
    pub recipes: Vec<DVector<f64>>,
    pub deviations: Vec<DVector<f64>>,
}

impl DoeTrajectory {
    pub fn len(&self) -> usize {
        self.recipes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.recipes.is_empty()
    }
}

fn check_trajectories(data: &[DoeTrajectory]) -> Result<(usize, usize)> {
    if data.len() < 2 || data.iter().any(|d| d.len() < 2) {
        return Err(Error::Contract(
            "need at least two trajectories of at least two runs".into(),
        ));
    }
    let m = data[0].recipes[0].len();
    let n = data[0].deviations[0].len();
    for d in data {
        check_dim("trajectory outputs", d.recipes.len(), d.deviations.len())?;
        for (u, z) in d.recipes.iter().zip(&d.deviations) {
            check_dim("trajectory recipe", m, u.len())?;
            check_dim("trajectory deviation", n, z.len())?;
        }
    }
    Ok((m, n))
}

/// `z_t = β0 + β1 u_t + β2 z_{t−1} + β3 t + noise`, with residuals `e_t = ẑ_t − z_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicLinearFit {
    pub beta0: DVector<f64>,
    pub beta1: DMatrix<f64>,
    pub beta2: DMatrix<f64>,
    pub beta3: DVector<f64>,
    /// Residuals per trajectory, aligned with its runs.
    pub residuals: Vec<Vec<DVector<f64>>>,
    /// Sample variance of the residuals per output.
    pub residual_var: DVector<f64>,
}

impl DynamicLinearFit {
    pub fn predict(&self, u: &DVector<f64>, z_prev: &DVector<f64>, t: usize) -> DVector<f64> {
        &self.beta0 + &self.beta1 * u + &self.beta2 * z_prev + &self.beta3 * t as f64
    }
}

/// Per-output OLS on `[1, u, z_{t−1}, t]`.
pub fn fit_dynamic_linear(data: &[DoeTrajectory]) -> Result<DynamicLinearFit> {
    let (m, n) = check_trajectories(data)?;
    let rows: usize = data.iter().map(|d| d.len()).sum();
    let p = 1 + m + n + 1;
    let mut x = DMatrix::zeros(rows, p);
    let mut zs = DMatrix::zeros(rows, n);
    let mut r = 0;
    for d in data {
        let mut z_prev = DVector::zeros(n);
        for (k, (u, z)) in d.recipes.iter().zip(&d.deviations).enumerate() {
            x[(r, 0)] = 1.0;
            x.view_mut((r, 1), (1, m)).copy_from(&u.transpose());
            x.view_mut((r, 1 + m), (1, n)).copy_from(&z_prev.transpose());
            x[(r, p - 1)] = (k + 1) as f64;
            zs.row_mut(r).copy_from(&z.transpose());
            z_prev = z.clone();
            r += 1;
        }
    }
    let mut coef = DMatrix::zeros(n, p);
    for j in 0..n {
        let fit = ols(&x, &zs.column(j).into_owned())?;
        coef.row_mut(j).copy_from(&fit.coef.transpose());
    }
    let mut fit = DynamicLinearFit {
        beta0: coef.column(0).into_owned(),
        beta1: coef.columns(1, m).into_owned(),
        beta2: coef.columns(1 + m, n).into_owned(),
        beta3: coef.column(p - 1).into_owned(),
        residuals: Vec::with_capacity(data.len()),
        residual_var: DVector::zeros(n),
    };
    let mut all = Vec::with_capacity(rows);
    for d in data {
        let mut z_prev = DVector::zeros(n);
        let mut res = Vec::with_capacity(d.len());
        for (k, (u, z)) in d.recipes.iter().zip(&d.deviations).enumerate() {
            let e = fit.predict(u, &z_prev, k + 1) - z;
            all.push(e.clone());
            res.push(e);
            z_prev = z.clone();
        }
        fit.residuals.push(res);
    }
    let (_, cov) = crate::linalg::sample_covariance(&all);
    fit.residual_var = cov.diagonal();
    Ok(fit)
}

/// Fitted DOE model of one output:
/// `z = θ0 + θᵀu + γ t + ϑ e_{t−1} + ω z_{t−1} + φ t e_{t−1} + r`.
#[derive(Debug, Clone, PartialEq)]
pub struct DoeOutputModel {
    pub intercept: f64,
    pub theta: DVector<f64>,
    pub gamma: f64,
    pub vartheta: f64,
    pub omega: f64,
    pub phi: f64,
    pub sigma_theta: DMatrix<f64>,
    pub var_intercept: f64,
    pub var_gamma: f64,
    pub var_vartheta: f64,
    pub var_omega: f64,
    pub var_phi: f64,
    /// Residual variance of the DOE regression.
    pub var_r: f64,
    /// Variance of the dynamic-model noise `e`.
    pub var_e: f64,
}

impl DoeOutputModel {
    fn mean_offset(&self, t: f64, z: f64, e: f64) -> f64 {
        self.intercept + self.gamma * t + self.vartheta * e + self.phi * t * e + self.omega * z
    }

    /// Variance of this output's prediction error at recipe `u`, excluding the
    /// squared mean.
    fn variance_terms(&self, u: &DVector<f64>, t: f64, z: f64, e: f64) -> f64 {
        let lag_gain = self.vartheta + self.phi * t;
        self.var_intercept
            + (&self.sigma_theta * u).dot(u)
            + t * t * self.var_gamma
            + e * e * self.var_vartheta
            + z * z * self.var_omega
            + t * t * e * e * self.var_phi
            + self.var_r
            + lag_gain * lag_gain * self.var_e
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DoeModelFit {
    pub outputs: Vec<DoeOutputModel>,
}

impl DoeModelFit {
    pub fn input_dim(&self) -> usize {
        self.outputs[0].theta.len()
    }

    pub fn output_dim(&self) -> usize {
        self.outputs.len()
    }
}

/// Per-output OLS on `[1, u, t, e_{t−1}, z_{t−1}, t·e_{t−1}]`, with lagged residuals
/// from the dynamic fit. Regressor columns that are identically zero (for
/// instance the noise terms when the dynamic fit is exact) are left out and
/// reported with zero coefficient and variance.
pub fn fit_doe_model(data: &[DoeTrajectory], dynamic: &DynamicLinearFit) -> Result<DoeModelFit> {
    let (m, n) = check_trajectories(data)?;
    check_dim("dynamic fit trajectories", data.len(), dynamic.residuals.len())?;
    let rows: usize = data.iter().map(|d| d.len()).sum();
    let p = 1 + m + 4;
    let mut outputs = Vec::with_capacity(n);
    for j in 0..n {
        let mut x = DMatrix::zeros(rows, p);
        let mut y = DVector::zeros(rows);
        let mut r = 0;
        for (d, res) in data.iter().zip(&dynamic.residuals) {
            check_dim("dynamic fit residuals", d.len(), res.len())?;
            let (mut e_prev, mut z_prev) = (0.0, 0.0);
            for (k, (u, z)) in d.recipes.iter().zip(&d.deviations).enumerate() {
                let t = (k + 1) as f64;
                x[(r, 0)] = 1.0;
                x.view_mut((r, 1), (1, m)).copy_from(&u.transpose());
                x[(r, 1 + m)] = t;
                x[(r, 2 + m)] = e_prev;
                x[(r, 3 + m)] = z_prev;
                x[(r, 4 + m)] = t * e_prev;
                y[r] = z[j];
                e_prev = res[k][j];
                z_prev = z[j];
                r += 1;
            }
        }
        let scale = x.amax().max(1.0);
        let keep: Vec<usize> = (0..p)
            .filter(|&c| x.column(c).amax() > 1e-9 * scale)
            .collect();
        let xs = x.select_columns(&keep);
        let fit = ols(&xs, &y)?;
        let cov = fit.coef_cov();
        let mut coef = DVector::zeros(p);
        let mut full_cov = DMatrix::zeros(p, p);
        for (a, &ca) in keep.iter().enumerate() {
            coef[ca] = fit.coef[a];
            for (b, &cb) in keep.iter().enumerate() {
                full_cov[(ca, cb)] = cov[(a, b)];
            }
        }
        outputs.push(DoeOutputModel {
            intercept: coef[0],
            theta: coef.rows(1, m).into_owned(),
            gamma: coef[1 + m],
            vartheta: coef[2 + m],
            omega: coef[3 + m],
            phi: coef[4 + m],
            sigma_theta: symmetrize(&full_cov.view((1, 1), (m, m)).into_owned()),
            var_intercept: full_cov[(0, 0)],
            var_gamma: full_cov[(1 + m, 1 + m)],
            var_vartheta: full_cov[(2 + m, 2 + m)],
            var_omega: full_cov[(3 + m, 3 + m)],
            var_phi: full_cov[(4 + m, 4 + m)],
            var_r: fit.residual_var,
            var_e: dynamic.residual_var[j],
        });
    }
    Ok(DoeModelFit { outputs })
}

fn check_state(fit: &DoeModelFit, z_prev: &DVector<f64>, e_prev: &DVector<f64>) -> Result<()> {
    check_dim("previous deviation", fit.output_dim(), z_prev.len())?;
    check_dim("previous noise", fit.output_dim(), e_prev.len())
}

/// Expected squared deviation summed over outputs, including parameter and
/// noise uncertainty.
pub fn apc_objective(
    fit: &DoeModelFit,
    u: &DVector<f64>,
    t: usize,
    z_prev: &DVector<f64>,
    e_prev: &DVector<f64>,
) -> Result<f64> {
    check_state(fit, z_prev, e_prev)?;
    check_dim("recipe", fit.input_dim(), u.len())?;
    let t = t as f64;
    Ok(fit
        .outputs
        .iter()
        .enumerate()
        .map(|(j, o)| {
            let mean = o.mean_offset(t, z_prev[j], e_prev[j]) + o.theta.dot(u);
            mean * mean + o.variance_terms(u, t, z_prev[j], e_prev[j])
        })
        .sum())
}

/// Closed-form minimizer of [`apc_objective`]:
/// `u = −[Σ_j (Σθ_j + θ_j θ_jᵀ)]⁻¹ Σ_j k_j θ_j` with `k_j` the recipe-free mean.
pub fn apc_recipe(
    fit: &DoeModelFit,
    t: usize,
    z_prev: &DVector<f64>,
    e_prev: &DVector<f64>,
) -> Result<ControlRecipe> {
    check_state(fit, z_prev, e_prev)?;
    let m = fit.input_dim();
    let tf = t as f64;
    let mut a = DMatrix::zeros(m, m);
    let mut b = DVector::zeros(m);
    for (j, o) in fit.outputs.iter().enumerate() {
        a += &o.sigma_theta + &o.theta * o.theta.transpose();
        b += &o.theta * o.mean_offset(tf, z_prev[j], e_prev[j]);
    }
    let a = symmetrize(&a);
    let u = a
        .clone()
        .cholesky()
        .map(|c| -c.solve(&b))
        .ok_or_else(|| Error::Numeric(format!("recipe normal matrix is singular: {a:?}")))?;
    ControlRecipe::new(u)
}

/// Coded `(u1, u2, u3, t)` levels of the eight design cells; `t = u1·u2·u3`.
pub const DESIGN_CELLS: [[f64; 4]; 8] = [
    [-1.0, -1.0, -1.0, -1.0],
    [-1.0, 1.0, 1.0, -1.0],
    [1.0, 1.0, -1.0, -1.0],
    [1.0, -1.0, 1.0, -1.0],
    [-1.0, 1.0, -1.0, 1.0],
    [-1.0, -1.0, 1.0, 1.0],
    [1.0, -1.0, -1.0, 1.0],
    [1.0, 1.0, 1.0, 1.0],
];

/// Design cell whose coded levels equal `levels`.
pub fn design_cell(levels: &[f64; 4]) -> Option<usize> {
    DESIGN_CELLS.iter().position(|c| c == levels)
}

/// One response observed at a design cell.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorialObservation {
    pub levels: [f64; 4],
    /// Sign of the previous noise per output (`true` for `e_{t−1} ≥ 0`).
    pub noise_positive: Vec<bool>,
    pub response: DVector<f64>,
}

/// Mean responses per design cell, noise sign and output.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorialDesign {
    pub cells: [[f64; 4]; 8],
    /// `means[cell][sign][output]`, sign 0 for negative noise and 1 for positive.
    pub means: Vec<[Vec<f64>; 2]>,
    pub counts: Vec<[Vec<usize>; 2]>,
}

impl FactorialDesign {
    pub fn mean_count(&self) -> usize {
        self.means.iter().map(|c| c[0].len() + c[1].len()).sum()
    }
}

pub fn factorial_summary(data: &[FactorialObservation]) -> Result<FactorialDesign> {
    let n = data
        .first()
        .ok_or_else(|| Error::Contract("no factorial observations".into()))?
        .response
        .len();
    let mut sums = vec![[vec![0.0; n], vec![0.0; n]]; 8];
    let mut counts = vec![[vec![0usize; n], vec![0usize; n]]; 8];
    for obs in data {
        check_dim("factorial response", n, obs.response.len())?;
        check_dim("factorial noise signs", n, obs.noise_positive.len())?;
        let cell = design_cell(&obs.levels).ok_or_else(|| {
            Error::Contract(format!("levels {:?} are not a design cell", obs.levels))
        })?;
        for j in 0..n {
            let s = obs.noise_positive[j] as usize;
            sums[cell][s][j] += obs.response[j];
            counts[cell][s][j] += 1;
        }
    }
    let mut means = Vec::with_capacity(8);
    for (cell, (sum, count)) in sums.iter().zip(&counts).enumerate() {
        let mut per_sign = [vec![0.0; n], vec![0.0; n]];
        for s in 0..2 {
            for j in 0..n {
                if count[s][j] == 0 {
                    return Err(Error::Contract(format!(
                        "design cell {} has no observations with {} noise for output {}",
                        cell + 1,
                        if s == 1 { "positive" } else { "negative" },
                        j + 1
                    )));
                }
                per_sign[s][j] = sum[s][j] / count[s][j] as f64;
            }
        }
        means.push(per_sign);
    }
    Ok(FactorialDesign {
        cells: DESIGN_CELLS,
        means,
        counts,
    })
}

/// Factorial observations of offline design data: each run's recipe levels,
/// the run half as the `t` level, and the sign of the previous dynamic residual.
pub fn factorial_observations(
    data: &[DoeTrajectory],
    dynamic: &DynamicLinearFit,
) -> Result<Vec<FactorialObservation>> {
    let mut out = Vec::new();
    for (d, res) in data.iter().zip(&dynamic.residuals) {
        let horizon = d.len();
        let n = d.deviations[0].len();
        let mut e_prev = DVector::zeros(n);
        for (k, (u, z)) in d.recipes.iter().zip(&d.deviations).enumerate() {
            check_dim("design recipe", 3, u.len())?;
            let t_level = if 2 * (k + 1) <= horizon { -1.0 } else { 1.0 };
            out.push(FactorialObservation {
                levels: [u[0], u[1], u[2], t_level],
                noise_positive: e_prev.iter().map(|&e| e >= 0.0).collect(),
                response: z.clone(),
            });
            e_prev = res[k].clone();
        }
    }
    Ok(out)
}

/// Offline design cycles: runs in the first half of a cycle use a random cell
/// with low `t` level, the second half a random cell with high `t` level.
pub fn generate_design_data(
    plant: &dyn Plant,
    model: &DisturbanceModel,
    target: &DVector<f64>,
    horizon: usize,
    cycles: usize,
    root: StreamKey,
) -> Result<Vec<DoeTrajectory>> {
    check_dim("design plant inputs", 3, plant.input_dim())?;
    check_dim("target", plant.output_dim(), target.len())?;
    (0..cycles)
        .map(|c| {
            let mut line = SimulatedLine::new(plant, model, root.path(&[0, c as u64]))?;
            let mut rng = root.path(&[1, c as u64]).rng();
            let mut traj = DoeTrajectory {
                recipes: Vec::with_capacity(horizon),
                deviations: Vec::with_capacity(horizon),
            };
            for t in 1..=horizon {
                let high = 2 * t > horizon;
                let pick = rng.random_range(0..4) + if high { 4 } else { 0 };
                let u = DVector::from_row_slice(&DESIGN_CELLS[pick][..3]);
                let y = line.apply(&ControlRecipe::new(u.clone())?, t)?;
                traj.deviations.push(y.values() - target);
                traj.recipes.push(u);
            }
            Ok(traj)
        })
        .collect()
}

/// The dynamic fit and DOE model a controller runs on.
#[derive(Debug, Clone, PartialEq)]
pub struct ApcModel {
    pub dynamic: DynamicLinearFit,
    pub doe: DoeModelFit,
}

impl ApcModel {
    pub fn fit(data: &[DoeTrajectory]) -> Result<Self> {
        let dynamic = fit_dynamic_linear(data)?;
        let doe = fit_doe_model(data, &dynamic)?;
        Ok(ApcModel { dynamic, doe })
    }

    /// Key-value text dump of every coefficient.
    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        let join = |v: &mut dyn Iterator<Item = f64>| {
            v.map(|x| x.to_string()).collect::<Vec<_>>().join(",")
        };
        let mut s = String::from("# mfrl-apc-model v1\n");
        let d = &self.dynamic;
        writeln!(s, "dynamic.beta0 = {}", join(&mut d.beta0.iter().copied())).unwrap();
        writeln!(s, "dynamic.beta1 = {}", join(&mut d.beta1.transpose().iter().copied())).unwrap();
        writeln!(s, "dynamic.beta2 = {}", join(&mut d.beta2.transpose().iter().copied())).unwrap();
        writeln!(s, "dynamic.beta3 = {}", join(&mut d.beta3.iter().copied())).unwrap();
        writeln!(s, "dynamic.residual_var = {}", join(&mut d.residual_var.iter().copied())).unwrap();
        for (j, o) in self.doe.outputs.iter().enumerate() {
            let k = j + 1;
            writeln!(s, "doe.{k}.intercept = {}", o.intercept).unwrap();
            writeln!(s, "doe.{k}.theta = {}", join(&mut o.theta.iter().copied())).unwrap();
            writeln!(s, "doe.{k}.gamma = {}", o.gamma).unwrap();
            writeln!(s, "doe.{k}.vartheta = {}", o.vartheta).unwrap();
            writeln!(s, "doe.{k}.omega = {}", o.omega).unwrap();
            writeln!(s, "doe.{k}.phi = {}", o.phi).unwrap();
            writeln!(s, "doe.{k}.sigma_theta = {}", join(&mut o.sigma_theta.transpose().iter().copied())).unwrap();
            writeln!(s, "doe.{k}.var_intercept = {}", o.var_intercept).unwrap();
            writeln!(s, "doe.{k}.var_gamma = {}", o.var_gamma).unwrap();
            writeln!(s, "doe.{k}.var_vartheta = {}", o.var_vartheta).unwrap();
            writeln!(s, "doe.{k}.var_omega = {}", o.var_omega).unwrap();
            writeln!(s, "doe.{k}.var_phi = {}", o.var_phi).unwrap();
            writeln!(s, "doe.{k}.var_r = {}", o.var_r).unwrap();
            writeln!(s, "doe.{k}.var_e = {}", o.var_e).unwrap();
        }
        w.write_all(s.as_bytes())?;
        Ok(())
    }
}

/// Runs the DOE controller for one cycle. The previous noise `e_{t−1}` is the
/// dynamic model's one-step prediction error of the last run; recipes are
/// clamped to `bounds`.
#[allow(clippy::too_many_arguments)]
pub fn run_apc_controller(
    model: &ApcModel,
    plant: &dyn Plant,
    disturbance: &DisturbanceModel,
    target: &DVector<f64>,
    weights: &CostWeights,
    horizon: usize,
    bounds: &RecipeBox,
    disturbance_key: StreamKey,
) -> Result<Trajectory> {
    if horizon == 0 {
        return Err(Error::Contract("horizon must be at least one run".into()));
    }
    check_dim("APC model inputs", plant.input_dim(), model.doe.input_dim())?;
    check_dim("APC model outputs", plant.output_dim(), model.doe.output_dim())?;
    let n = plant.output_dim();
    let mut line = SimulatedLine::new(plant, disturbance, disturbance_key)?;
    let mut z_prev = DVector::zeros(n);
    let mut e_prev = DVector::zeros(n);
    let mut runs = Vec::with_capacity(horizon);
    for t in 1..=horizon {
        let u = bounds.clamp_recipe(&apc_recipe(&model.doe, t, &z_prev, &e_prev)?);
        let run = execute_run(&mut line, &u, t, weights, target)?;
        let z = &run.output - target;
        e_prev = model.dynamic.predict(u.values(), &z_prev, t) - &z;
        z_prev = z;
        runs.push(run);
    }
    Ok(Trajectory { runs })
}
