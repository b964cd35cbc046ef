//! Bayesian melding of one-box aerosol models with noisy measurements.

pub mod error;
pub mod experiment;
pub mod mechanistic;
pub mod model_eval;
pub mod predictive;
pub mod rng;
pub mod sampler;
pub mod state_space;
pub mod stats;
