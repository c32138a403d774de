//! Learning finite-horizon Kalman gains by policy optimization.
//!
//! The filtering problem for a linear time-invariant system is recast as the
//! minimization of a closed-form cost `f(K)` over the gain schedule
//! `K = (K_0, ..., K_{M-1})`. Two optimizers are provided:
//!
//! * exact gradient descent ([`learner::run_gd`]) when the noise covariances
//!   are known, using the closed-form gradient `2 Σ_t E_t`;
//! * stochastic gradient descent ([`learner::run_sgd`]) driven only by
//!   observation trajectories, for when the covariances are unknown.
//!
//! The Riccati recursion ([`riccati`]) is the ground truth, and [`dualsim`]
//! holds two independent oracles (dual-system Monte Carlo and the stacked
//! noise representation) used to cross-check costs and gradients.

// Stage-indexed loops over several parallel schedules read better with indices.
#![allow(clippy::needless_range_loop)]

pub mod dualsim;
mod error;
pub mod instances;
pub mod learner;
pub mod linalg;
pub mod model;
pub mod objective;
pub mod riccati;
pub mod seed;

pub use error::{Error, Result};
pub use learner::{
    estimate_gradient, predict, run_gd, run_sgd, sample_cost, BatchSource, Evaluator, GradientEstimate,
    PredictedObservations, RunRecord, RunTrace, SgdConfig,
};
pub use model::{
    sample_batch, simulate, validate, ModelSpec, NoiseSpec, ObservationBatch, Simulator, Trajectory, ValidationReport,
};
pub use objective::{
    cost, diagnostics, error_covariances, gradient, sigma_weight, CostGradient, DiagnosticConstants, GainSchedule,
};
pub use riccati::{solve_riccati, RiccatiSolution};

/// Dense real matrix used throughout.
pub type Mat = nalgebra::DMatrix<f64>;
/// Dense real column vector.
pub type Vector = nalgebra::DVector<f64>;
