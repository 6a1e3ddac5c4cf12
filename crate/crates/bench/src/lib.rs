//! Benchmark harness for the WAVE estimator: seeded simulation grids,
//! error and selection metrics, and report writers.

pub mod config;
pub mod error;
pub mod metrics;
pub mod report;
pub mod runner;

pub use config::{BenchConfig, CellConfig};
pub use error::{BenchError, Result};
pub use runner::{run_bench, run_repetition, BenchReport, CellReport, Method};
