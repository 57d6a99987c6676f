//! Federated learning simulator for client-level fairness under imaging
//! quality shift.
//!
//! Clients train a small MLP on label-skewed shards, some of which carry
//! feature noise. The server aggregates with FedAvg, a loss-reweighting
//! baseline, or sharpness-aware weights; local training runs plain gradient
//! steps or sharpness-aware (SAM) steps. Update and aggregation rules are
//! looked up by name in a [`StrategyRegistry`].

// `!(x > 0.0)` is used on purpose so NaN inputs are rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod landscape;
pub mod metrics;
pub mod minimax;
pub mod nn;
pub mod rng;
pub mod sharpness;
pub mod strategy;
pub mod verify;

pub use error::{Error, Result};
pub use experiment::{run_experiment, run_experiment_with_threads, ExperimentConfig, ExperimentResult, Summary};
pub use federation::{AggregationWeights, ClientReport, MethodSpec};
pub use nn::{MlpArchitecture, ParameterVector};
pub use strategy::StrategyRegistry;
