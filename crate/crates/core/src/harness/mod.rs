//! Experiment configuration, execution and comparison.

pub mod compare;
pub mod config;
pub mod runner;

pub use compare::{compare, ComparisonRow, ComparisonTable};
pub use config::{load_config, parse_config, RunConfig};
pub use runner::{generate_dataset, run_experiment, RunArtifacts, RunSummary};
