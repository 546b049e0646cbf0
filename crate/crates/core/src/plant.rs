//! Simulated manufacturing plants.
//!
//! Every plant follows the additive contract `y_t = g(u_t, t) + d_t`: the
//! recipe effect and the disturbance never interact. Controllers only talk to
//! a [`ProcessLine`], which hides the disturbance behind the observed output.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, Error, Result};
use crate::linalg::{ensure_finite_mat, ensure_finite_vec};
use crate::rng::StreamKey;

/// Coded control settings applied for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlRecipe(DVector<f64>);

impl ControlRecipe {
    pub fn new(values: DVector<f64>) -> Result<Self> {
        ensure_finite_vec("control recipe", &values)?;
        Ok(ControlRecipe(values))
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        Self::new(DVector::from_column_slice(values))
    }

    pub fn zeros(m: usize) -> Self {
        ControlRecipe(DVector::zeros(m))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DVector<f64> {
        self.0
    }
}

/// Measured quality characteristics of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessOutput(DVector<f64>);

impl ProcessOutput {
    pub fn new(values: DVector<f64>) -> Result<Self> {
        ensure_finite_vec("process output", &values)?;
        Ok(ProcessOutput(values))
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        Self::new(DVector::from_column_slice(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DVector<f64> {
        self.0
    }
}

/// Admissible per-coordinate range for recipes, in coded units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecipeBox {
    pub lower: f64,
    pub upper: f64,
}

impl Default for RecipeBox {
    fn default() -> Self {
        RecipeBox {
            lower: -2.0,
            upper: 2.0,
        }
    }
}

impl RecipeBox {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        if !(lower.is_finite() && upper.is_finite() && lower < upper) {
            return Err(Error::Contract(format!(
                "recipe box needs finite lower < upper, got [{lower}, {upper}]"
            )));
        }
        Ok(RecipeBox { lower, upper })
    }

    /// A box wide enough to never bind.
    pub fn unbounded() -> Self {
        RecipeBox {
            lower: f64::NEG_INFINITY,
            upper: f64::INFINITY,
        }
    }

    pub fn contains(&self, u: &DVector<f64>) -> bool {
        u.iter().all(|&x| x >= self.lower && x <= self.upper)
    }

    pub fn clamp(&self, u: &DVector<f64>) -> DVector<f64> {
        u.map(|x| x.clamp(self.lower, self.upper))
    }

    pub fn clamp_in_place(&self, u: &mut DVector<f64>) {
        u.apply(|x| *x = x.clamp(self.lower, self.upper));
    }

    pub fn clamp_recipe(&self, u: &ControlRecipe) -> ControlRecipe {
        ControlRecipe(self.clamp(&u.0))
    }
}

/// A deterministic process model `g(u, t)` with additive disturbance.
pub trait Plant: Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;

    /// Disturbance-free response `g(u, t)`. Callers guarantee `u.len() == input_dim()`.
    fn response(&self, u: &DVector<f64>, t: usize) -> DVector<f64>;

    /// Output `g(u, t) + d` with dimension checks.
    fn eval(&self, u: &ControlRecipe, t: usize, d: &DVector<f64>) -> Result<ProcessOutput> {
        check_dim("recipe", self.input_dim(), u.dim())?;
        check_dim("disturbance", self.output_dim(), d.len())?;
        ProcessOutput::new(self.response(u.values(), t) + d)
    }
}

/// Coefficients of the nonlinear CMP response surface, target and horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct CmpPlantSpec {
    pub coeff: DMatrix<f64>,
    pub target: DVector<f64>,
    pub horizon: usize,
}

/// Width of the CMP feature vector.
pub const CMP_FEATURES: usize = 11;

#[rustfmt::skip]
const CMP_COEFF: [f64; 22] = [
    2756.5, 547.6, 616.3, -126.7, -1109.5, -286.1, 989.1, -52.9, -156.9, -550.3, -10.0,
     746.3,  62.3, 128.6, -152.1,  -289.7,  -32.1, 237.7, -28.9, -122.1, -140.6,   1.5,
];

impl CmpPlantSpec {
    /// Removal rate / within-wafer non-uniformity model with targets 2200 and 400
    /// over a 50-run cycle.
    pub fn standard() -> Self {
        CmpPlantSpec {
            coeff: DMatrix::from_row_slice(2, CMP_FEATURES, &CMP_COEFF),
            target: DVector::from_vec(vec![2200.0, 400.0]),
            horizon: 50,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_dim("CMP coefficient rows", 2, self.coeff.nrows())?;
        check_dim("CMP coefficient columns", CMP_FEATURES, self.coeff.ncols())?;
        check_dim("CMP target", 2, self.target.len())?;
        ensure_finite_mat("CMP coefficients", &self.coeff)?;
        if self.target.iter().any(|&x| x.is_nan() || x <= 0.0) {
            return Err(Error::Contract("CMP targets must be positive".into()));
        }
        if self.horizon == 0 {
            return Err(Error::Contract("CMP horizon must be positive".into()));
        }
        Ok(())
    }
}

/// `[1, u1, u2, u3, u1², u2², u3², u1·u2, u1·u3, u2·u3, t]`.
pub fn cmp_feature_vector(u: &ControlRecipe, t: usize) -> Result<DVector<f64>> {
    check_dim("CMP recipe", 3, u.dim())?;
    Ok(cmp_features(u.values(), t))
}

fn cmp_features(u: &DVector<f64>, t: usize) -> DVector<f64> {
    let (u1, u2, u3) = (u[0], u[1], u[2]);
    DVector::from_row_slice(&[
        1.0,
        u1,
        u2,
        u3,
        u1 * u1,
        u2 * u2,
        u3 * u3,
        u1 * u2,
        u1 * u3,
        u2 * u3,
        t as f64,
    ])
}

/// `C · x(u, t) + d`.
pub fn cmp_eval(
    spec: &CmpPlantSpec,
    u: &ControlRecipe,
    t: usize,
    d: &DVector<f64>,
) -> Result<ProcessOutput> {
    check_dim("CMP disturbance", 2, d.len())?;
    let x = cmp_feature_vector(u, t)?;
    ProcessOutput::new(&spec.coeff * x + d)
}

#[derive(Debug, Clone)]
pub struct CmpPlant {
    spec: CmpPlantSpec,
}

impl CmpPlant {
    pub fn new(spec: CmpPlantSpec) -> Result<Self> {
        spec.validate()?;
        Ok(CmpPlant { spec })
    }

    pub fn standard() -> Self {
        CmpPlant {
            spec: CmpPlantSpec::standard(),
        }
    }

    pub fn spec(&self) -> &CmpPlantSpec {
        &self.spec
    }
}

impl Plant for CmpPlant {
    fn input_dim(&self) -> usize {
        3
    }

    fn output_dim(&self) -> usize {
        2
    }

    fn response(&self, u: &DVector<f64>, t: usize) -> DVector<f64> {
        &self.spec.coeff * cmp_features(u, t)
    }
}

/// Synthetic plant `g(u) = offset + G (u - optimum)` with a known optimum.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticPlantSpec {
    pub gradient_matrix: DMatrix<f64>,
    pub optimum: DVector<f64>,
    pub offset: DVector<f64>,
}

impl QuadraticPlantSpec {
    pub fn new(
        gradient_matrix: DMatrix<f64>,
        optimum: DVector<f64>,
        offset: DVector<f64>,
    ) -> Result<Self> {
        check_dim("optimum", gradient_matrix.ncols(), optimum.len())?;
        check_dim("offset", gradient_matrix.nrows(), offset.len())?;
        ensure_finite_mat("gradient matrix", &gradient_matrix)?;
        let rank = gradient_matrix.clone().svd(false, false).rank(1e-10);
        if rank < gradient_matrix.ncols() {
            return Err(Error::Numeric(format!(
                "gradient matrix must have full column rank {}, has rank {rank}",
                gradient_matrix.ncols()
            )));
        }
        Ok(QuadraticPlantSpec {
            gradient_matrix,
            optimum,
            offset,
        })
    }
}

/// `offset + G (u - optimum) + d`.
pub fn quadratic_eval(
    spec: &QuadraticPlantSpec,
    u: &ControlRecipe,
    d: &DVector<f64>,
) -> Result<ProcessOutput> {
    check_dim("recipe", spec.optimum.len(), u.dim())?;
    check_dim("disturbance", spec.offset.len(), d.len())?;
    ProcessOutput::new(&spec.offset + &spec.gradient_matrix * (u.values() - &spec.optimum) + d)
}

impl Plant for QuadraticPlantSpec {
    fn input_dim(&self) -> usize {
        self.optimum.len()
    }

    fn output_dim(&self) -> usize {
        self.offset.len()
    }

    fn response(&self, u: &DVector<f64>, _t: usize) -> DVector<f64> {
        &self.offset + &self.gradient_matrix * (u - &self.optimum)
    }
}

/// Linear plant with a deterministic drift: `g(u, t) = offset + gain·u + trend·t`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearTrendPlant {
    pub offset: DVector<f64>,
    pub gain: DMatrix<f64>,
    pub trend: DVector<f64>,
}

impl LinearTrendPlant {
    pub fn new(offset: DVector<f64>, gain: DMatrix<f64>, trend: DVector<f64>) -> Result<Self> {
        check_dim("linear plant offset", gain.nrows(), offset.len())?;
        check_dim("linear plant trend", gain.nrows(), trend.len())?;
        Ok(LinearTrendPlant {
            offset,
            gain,
            trend,
        })
    }
}

impl Plant for LinearTrendPlant {
    fn input_dim(&self) -> usize {
        self.gain.ncols()
    }

    fn output_dim(&self) -> usize {
        self.gain.nrows()
    }

    fn response(&self, u: &DVector<f64>, t: usize) -> DVector<f64> {
        &self.offset + &self.gain * u + &self.trend * t as f64
    }
}

/// State of independent per-dimension IMA(1,1) disturbances.
#[derive(Debug, Clone, PartialEq)]
pub struct Ima11State {
    pub level: DVector<f64>,
    pub prev_innovation: DVector<f64>,
    pub theta: DVector<f64>,
    pub innovation_std: DVector<f64>,
}

impl Ima11State {
    /// Starts at `d_0 = 0` with no previous innovation.
    pub fn new(theta: DVector<f64>, innovation_std: DVector<f64>) -> Result<Self> {
        check_dim("IMA innovation std", theta.len(), innovation_std.len())?;
        let n = theta.len();
        let state = Ima11State {
            level: DVector::zeros(n),
            prev_innovation: DVector::zeros(n),
            theta,
            innovation_std,
        };
        state.validate()?;
        Ok(state)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.theta.len();
        check_dim("IMA level", n, self.level.len())?;
        check_dim("IMA previous innovation", n, self.prev_innovation.len())?;
        check_dim("IMA innovation std", n, self.innovation_std.len())?;
        if self.theta.iter().any(|t| t.is_nan() || t.abs() >= 1.0) {
            return Err(Error::Contract(format!(
                "IMA theta must satisfy |theta| < 1, got {:?}",
                self.theta.as_slice()
            )));
        }
        if self.innovation_std.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::Contract(
                "IMA innovation std must be strictly positive".into(),
            ));
        }
        Ok(())
    }
}

/// One IMA(1,1) step driven by explicit innovations:
/// `d_t = d_{t-1} + e_t - theta · e_{t-1}`.
pub fn ima_step_with(state: &Ima11State, innovation: &DVector<f64>) -> (Ima11State, DVector<f64>) {
    let d = &state.level + innovation - state.theta.component_mul(&state.prev_innovation);
    let next = Ima11State {
        level: d.clone(),
        prev_innovation: innovation.clone(),
        theta: state.theta.clone(),
        innovation_std: state.innovation_std.clone(),
    };
    (next, d)
}

/// One IMA(1,1) step with Gaussian innovations drawn from `rng`.
pub fn ima_step<R: Rng + ?Sized>(state: &Ima11State, rng: &mut R) -> (Ima11State, DVector<f64>) {
    let eps = state
        .innovation_std
        .map(|s| s * rng.sample::<f64, _>(StandardNormal));
    ima_step_with(state, &eps)
}

/// Disturbance process family used by the simulator.
#[derive(Debug, Clone, PartialEq)]
pub enum DisturbanceModel {
    /// No disturbance at all.
    Zero { dim: usize },
    /// Independent IMA(1,1) per output dimension, starting from zero.
    Ima11 {
        theta: DVector<f64>,
        innovation_std: DVector<f64>,
    },
}

/// State carried by a running disturbance process.
#[derive(Debug, Clone, PartialEq)]
pub enum DisturbanceState {
    Zero(usize),
    Ima11(Ima11State),
}

impl DisturbanceModel {
    pub fn ima11(theta: &[f64], innovation_std: &[f64]) -> Result<Self> {
        let model = DisturbanceModel::Ima11 {
            theta: DVector::from_column_slice(theta),
            innovation_std: DVector::from_column_slice(innovation_std),
        };
        model.initial_state()?;
        Ok(model)
    }

    pub fn dim(&self) -> usize {
        match self {
            DisturbanceModel::Zero { dim } => *dim,
            DisturbanceModel::Ima11 { theta, .. } => theta.len(),
        }
    }

    pub fn initial_state(&self) -> Result<DisturbanceState> {
        Ok(match self {
            DisturbanceModel::Zero { dim } => DisturbanceState::Zero(*dim),
            DisturbanceModel::Ima11 {
                theta,
                innovation_std,
            } => DisturbanceState::Ima11(Ima11State::new(theta.clone(), innovation_std.clone())?),
        })
    }

    /// Covariance of one innovation; the natural random-walk process noise.
    pub fn innovation_cov(&self) -> DMatrix<f64> {
        match self {
            DisturbanceModel::Zero { dim } => DMatrix::zeros(*dim, *dim),
            DisturbanceModel::Ima11 { innovation_std, .. } => {
                DMatrix::from_diagonal(&innovation_std.map(|s| s * s))
            }
        }
    }

    /// Unconditional distribution of `d_t` given `d_0 = 0`:
    /// `d_t = e_t + (1 - theta) Σ_{s<t} e_s`, so the variance is
    /// `σ² (1 + (t - 1)(1 - theta)²)`.
    pub fn marginal(&self, t: usize) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.dim();
        match self {
            DisturbanceModel::Zero { .. } => (DVector::zeros(n), DMatrix::zeros(n, n)),
            DisturbanceModel::Ima11 {
                theta,
                innovation_std,
            } => {
                let lag = t.saturating_sub(1) as f64;
                let var = DVector::from_iterator(
                    n,
                    theta.iter().zip(innovation_std.iter()).map(|(th, s)| {
                        let w = 1.0 - th;
                        s * s * (1.0 + lag * w * w)
                    }),
                );
                (DVector::zeros(n), DMatrix::from_diagonal(&var))
            }
        }
    }
}

impl DisturbanceState {
    pub fn step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> DVector<f64> {
        match self {
            DisturbanceState::Zero(n) => DVector::zeros(*n),
            DisturbanceState::Ima11(state) => {
                let (next, d) = ima_step(state, rng);
                *state = next;
                d
            }
        }
    }
}

/// The only view of the process a controller gets: apply a recipe, read the output.
pub trait ProcessLine {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    /// Runs the process once at run index `t` (1-based, strictly sequential).
    fn apply(&mut self, u: &ControlRecipe, t: usize) -> Result<ProcessOutput>;
}

/// A plant driven by a hidden disturbance process.
///
/// The innovation of run `t` is drawn from `key.child(t)`, so two lines built
/// from the same key see the same disturbance path whatever recipes are applied.
pub struct SimulatedLine<'a, P: Plant + ?Sized> {
    plant: &'a P,
    state: DisturbanceState,
    key: StreamKey,
    history: Vec<DVector<f64>>,
}

impl<'a, P: Plant + ?Sized> SimulatedLine<'a, P> {
    pub fn new(plant: &'a P, model: &DisturbanceModel, key: StreamKey) -> Result<Self> {
        check_dim("disturbance model", plant.output_dim(), model.dim())?;
        Ok(SimulatedLine {
            plant,
            state: model.initial_state()?,
            key,
            history: Vec::new(),
        })
    }

    /// Realized disturbances so far. For diagnostics and tests, not for controllers.
    pub fn disturbance_history(&self) -> &[DVector<f64>] {
        &self.history
    }

    pub fn plant(&self) -> &P {
        self.plant
    }
}

impl<P: Plant + ?Sized> ProcessLine for SimulatedLine<'_, P> {
    fn input_dim(&self) -> usize {
        self.plant.input_dim()
    }

    fn output_dim(&self) -> usize {
        self.plant.output_dim()
    }

    fn apply(&mut self, u: &ControlRecipe, t: usize) -> Result<ProcessOutput> {
        let expected = self.history.len() + 1;
        if t != expected {
            return Err(Error::Contract(format!(
                "runs must be applied in order: expected run {expected}, got {t}"
            )));
        }
        let mut rng = self.key.child(t as u64).rng();
        let d = self.state.step(&mut rng);
        let y = self.plant.eval(u, t, &d)?;
        self.history.push(d);
        Ok(y)
    }
}
