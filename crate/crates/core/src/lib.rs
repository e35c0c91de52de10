//! Bayesian nonparametric ensembles of deterministic predictors.
//!
//! Base-model predictions are combined with location-dependent softmax weights
//! driven by Gaussian processes, plus a residual GP and Gaussian noise. The
//! resulting predictive CDF is then passed through a monotone GP link fitted so
//! that predicted quantiles match empirical frequencies.

pub mod baselines;
pub mod benchmark;
pub mod calibration;
pub mod config;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod evaluation;
pub mod gp;
pub mod inference;
pub mod kernels;
pub mod optim;
pub mod points;
pub mod seeds;
pub mod snapshot;
pub mod stats;

pub use error::{Error, Result};
pub use points::Points;
