//! Experiment runner for the `lysep` crate: flat TOML configs, per-run CSV
//! trajectories, seed-averaged summary tables and consistency reports.

pub mod config;
pub mod error;
pub mod runner;
pub mod summary;
pub mod trajectory;

pub use config::{ExperimentConfig, Model, ModelChoice, OUTPUT_DIR_ENV};
pub use error::{CliError, Result};
pub use runner::{collect_runs, report, run_experiment, summary_path, Experiment};
pub use summary::{stat, summarize, RunResult, Stat, SummaryRow};
pub use trajectory::{read_trajectory, RunKey};
