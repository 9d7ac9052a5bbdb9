//! Sinkhorn-Frank-Wolfe flows for entropic optimal transport with a convex
//! functional cost, plus the UAV traffic scenario built on top of it.
//!
//! The outer loop ([`flow::run`]) linearizes the functional at the current
//! plan, computes the entropic best response by log-domain Sinkhorn scaling on
//! the tilted kernel ([`inner::solve_inner`]), and moves a fraction `α`
//! towards it.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod flow;
pub mod functional;
pub mod inner;
pub mod kernel;
pub mod measures;
pub mod oracles;
mod par;
pub mod scenario;
pub mod verify;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use flow::{
    default_initial, dissipation_residual, energy, physical_energy, reference_energy, run, RunOutput, SfwConfig,
    SfwTrace, StopReason, TraceRow,
};
pub use functional::{quadratic_congestion, zero_functional, CongestionSpec, FunctionalModel, QuadraticCongestion};
pub use inner::{first_order_residual, solve_inner, InnerResult, InnerSettings, Potentials, Schedule};
pub use kernel::{gibbs_reference, tilt, ReferenceKernel};
pub use measures::{convex_combine, relative_entropy, total_variation, Coupling, DiscreteMeasure, GridPoint};
pub use par::logsumexp;
pub use scenario::{build_scenario, Scenario, ScenarioConfig};
