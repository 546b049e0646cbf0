//! Run-to-run process control with model-free random search.
//!
//! The crate contains the simulated plants, the basic random-search controller,
//! the Bayesian disturbance-inference controller with its offline memory buffer
//! and online matching phase, and a DOE regression baseline.

pub mod bayes;
pub mod controller;
pub mod cost;
pub mod doe;
pub mod error;
pub mod linalg;
pub mod ols;
pub mod online;
pub mod phase1;
pub mod plant;
pub mod rng;
pub mod search;

pub use bayes::GaussianBelief;
pub use cost::{cost, mcc, CostWeights};
pub use error::{Error, Result};
pub use plant::{
    CmpPlant, CmpPlantSpec, ControlRecipe, DisturbanceModel, Plant, ProcessLine, ProcessOutput,
    RecipeBox, SimulatedLine,
};
pub use rng::StreamKey;
pub use search::{SgdConfig, SearchOutcome};
