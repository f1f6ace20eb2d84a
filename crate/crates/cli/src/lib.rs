//! Experiment harness for nearest-ETF UFM training: TOML configs, parallel
//! multi-seed runs with per-run CSV traces, summary tables, static SVG plots
//! and an oracle validation battery.

pub mod config;
pub mod error;
pub mod plot;
pub mod run;
pub mod schema;
pub mod validate;

pub use config::{ExperimentConfig, Preset};
pub use error::{CliError, Result};
pub use run::{run_experiment, RunSummary};
pub use schema::MetricsRow;
