//! CSV layouts. Metrics traces have one row per logged iteration in the fixed
//! column order of [`COLUMNS`]; bump [`SCHEMA_VERSION`] when that changes.

use std::path::Path;

use nearest_etf::ufm::TrainTrace;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const SCHEMA_VERSION: u32 = 1;

pub const COLUMNS: [&str; 14] = [
    "run_id",
    "seed",
    "mode",
    "iteration",
    "loss",
    "train_top1",
    "nc1",
    "nc2",
    "nc3",
    "nc4_agreement",
    "equinorm_gap",
    "mean_cosine_margin",
    "inner_solve_iterations",
    "inner_solve_time",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub seed: u64,
    pub mode: String,
    pub iteration: usize,
    pub loss: f64,
    pub train_top1: f64,
    pub nc1: f64,
    pub nc2: f64,
    pub nc3: f64,
    pub nc4_agreement: f64,
    pub equinorm_gap: f64,
    pub mean_cosine_margin: f64,
    pub inner_solve_iterations: usize,
    /// Seconds; empty unless timing was recorded.
    pub inner_solve_time: Option<f64>,
}

impl MetricsRow {
    /// Value of a numeric column by name.
    pub fn value(&self, column: &str) -> Option<f64> {
        Some(match column {
            "loss" => self.loss,
            "train_top1" => self.train_top1,
            "nc1" => self.nc1,
            "nc2" => self.nc2,
            "nc3" => self.nc3,
            "nc4_agreement" => self.nc4_agreement,
            "equinorm_gap" => self.equinorm_gap,
            "mean_cosine_margin" => self.mean_cosine_margin,
            "inner_solve_iterations" => self.inner_solve_iterations as f64,
            "inner_solve_time" => self.inner_solve_time?,
            _ => return None,
        })
    }
}

/// Rows for every logged iteration of a trace (all of them carry metrics).
pub fn rows_from_trace(run_id: &str, seed: u64, trace: &TrainTrace) -> Vec<MetricsRow> {
    trace
        .rows
        .iter()
        .filter_map(|r| {
            let m = r.metrics.as_ref()?;
            Some(MetricsRow {
                run_id: run_id.to_string(),
                seed,
                mode: trace.mode.as_str().to_string(),
                iteration: r.iteration,
                loss: r.loss,
                train_top1: r.train_top1,
                nc1: m.nc1,
                nc2: m.nc2,
                nc3: m.nc3,
                nc4_agreement: m.nc4_agreement,
                equinorm_gap: m.equinorm_gap,
                mean_cosine_margin: m.mean_cosine_margin,
                inner_solve_iterations: r.inner_solve_iterations,
                inner_solve_time: r.inner_solve_time,
            })
        })
        .collect()
}

/// End-of-training cosine margin of one sample; empty when undefined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginRow {
    pub sample: usize,
    pub label: usize,
    pub margin: Option<f64>,
}

pub const MARGIN_COLUMNS: [&str; 3] = ["sample", "label", "margin"];

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::csv(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| CliError::csv(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Reads a CSV after checking that every column in `required` is present;
/// the first absent one is named in the error.
pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path, required: &[&str]) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::csv(path, e))?;
    let headers = r.headers().map_err(|e| CliError::csv(path, e))?.clone();
    if let Some(col) = required.iter().find(|c| !headers.iter().any(|h| h == **c)) {
        return Err(CliError::Schema { path: path.to_path_buf(), column: col.to_string() });
    }
    r.deserialize().collect::<std::result::Result<Vec<T>, _>>().map_err(|e| CliError::csv(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    read_csv(path, &COLUMNS)
}
