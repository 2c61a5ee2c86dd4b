//! Online variational filtering for state-space models.
//!
//! The crate provides generative models, a backward-factorised variational
//! family, regression-based gradient approximators, the online filtering
//! engine and classical baselines (Kalman, RMLE, EnKF, bootstrap PF).

pub mod baselines;
pub mod engine;
pub mod error;
pub mod math;
pub mod models;
pub mod regression;
pub mod smallnet;
pub mod variational;

pub use error::{Error, Result};
