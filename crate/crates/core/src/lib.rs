//! Deterministic simulator and analysis library for federated learning with
//! Bernoulli link failures and heterogeneous local solvers.
//!
//! The crate is organised bottom-up: [`model`] holds the shared types,
//! [`solvers`], [`sampling`], [`channel`] and [`aggregation`] implement one
//! round's components, [`engine`] runs rounds, and [`analysis`] evaluates the
//! closed-form surrogate quantities.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregation;
pub mod analysis;
pub mod channel;
pub mod config;
pub mod engine;
pub mod error;
pub mod model;
pub mod problems;
pub mod rng;
pub mod sampling;
pub mod solvers;

pub use config::{parse_config, preset, ConfigError, ExperimentConfig};
pub use engine::{run_experiment, AlgorithmSpec, RunTrace};
pub use error::{FedError, Result};
pub use model::{Algorithm, ClientProfile, ModelVector, Population, SolverSpec, SurrogateStats};
