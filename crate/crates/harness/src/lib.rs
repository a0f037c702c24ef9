//! Experiment harness: config parsing, seeded multi-run execution, baseline
//! policies, the TD-noise diagnostic and plot-ready aggregation.

pub mod aggregate;
pub mod config;
pub mod error;
pub mod policies;
pub mod probe;
pub mod runner;
pub mod stats;

pub use config::{ExperimentConfig, ExperimentKind, PolicyKind};
pub use error::HarnessError;
pub use runner::{run, run_collect, RunSummary};
