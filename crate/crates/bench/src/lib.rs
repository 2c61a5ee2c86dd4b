//! Benchmark runner for the online variational filter: configuration,
//! experiment drivers, metrics and plots.

pub mod config;
pub mod error;
pub mod experiments;
pub mod metrics;
pub mod plot;

pub use config::RunConfig;
pub use error::BenchError;
pub use experiments::{execute, run_to_dir, Outcome, Summary};
