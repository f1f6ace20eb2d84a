//! Multi-seed runs: every `(mode, seed)` pair is an independent job on a
//! bounded worker pool, writing its own CSV files.
//!
//! Layout of `output_dir/name/`:
//! - `config.toml`: the effective config after overrides
//! - `<mode>_seed<k>.csv`: metrics trace, see [`crate::schema::COLUMNS`]
//! - `<mode>_seed<k>_margins.csv`: end-of-training cosine margin per sample
//! - `runs.csv`: one line per run with its status
//! - `summary.csv`: median, min and max over seeds of every metric at each
//!   checkpoint, taken from the last logged row at or before the checkpoint
//!
//! For full-batch UFM training one iteration is one epoch.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use nearest_etf::ufm::{Mode, Trainer, UfmModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::schema::{rows_from_trace, write_csv, MarginRow, MetricsRow, SCHEMA_VERSION};

/// Metric columns aggregated in the summary table.
pub const SUMMARY_COLUMNS: [&str; 8] =
    ["loss", "train_top1", "nc1", "nc2", "nc3", "nc4_agreement", "equinorm_gap", "mean_cosine_margin"];

pub fn run_id(mode: Mode, seed: u64) -> String {
    format!("{mode}_seed{seed}")
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub metrics_path: PathBuf,
    pub margins_path: PathBuf,
    pub rows: Vec<MetricsRow>,
    pub first_perfect_iteration: Option<usize>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub run_id: String,
    pub seed: u64,
    pub mode: Mode,
    pub result: std::result::Result<RunRecord, String>,
}

/// One line of `runs.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunIndexRow {
    pub run_id: String,
    pub seed: u64,
    pub mode: String,
    pub status: String,
    pub first_perfect_iteration: Option<usize>,
    pub final_loss: Option<f64>,
    pub final_train_top1: Option<f64>,
    pub schema_version: u32,
    pub error: Option<String>,
}

/// One line of `summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub mode: String,
    pub checkpoint: usize,
    pub column: String,
    pub runs: usize,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub runs: Vec<RunOutcome>,
    pub table: Vec<SummaryRow>,
}

impl RunSummary {
    pub fn failures(&self) -> usize {
        self.runs.iter().filter(|r| r.result.is_err()).count()
    }

    /// 0 when every run finished, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.failures() == 0 {
            0
        } else {
            2
        }
    }

    pub fn stat(&self, mode: Mode, checkpoint: usize, column: &str) -> Option<&SummaryRow> {
        self.table.iter().find(|r| r.mode == mode.as_str() && r.checkpoint == checkpoint && r.column == column)
    }
}

/// Median (mean of the middle pair for even counts), min and max of the
/// non-NaN values.
pub fn median_min_max(values: &[f64]) -> Option<(f64, f64, f64)> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let med = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
    Some((med, v[0], v[n - 1]))
}

fn run_one(cfg: &ExperimentConfig, mode: Mode, seed: u64) -> Result<RunRecord> {
    let (d, c, n) = cfg.preset.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = UfmModel::random(d, c, n, mode, &mut rng)?;
    let labels = model.labels.clone();
    let (trace, _) = Trainer::new(model, cfg.train_config(seed))?.train()?;

    let id = run_id(mode, seed);
    let dir = cfg.run_dir();
    let rows = rows_from_trace(&id, seed, &trace);
    let metrics_path = dir.join(format!("{id}.csv"));
    write_csv(&metrics_path, &rows)?;

    let margins: Vec<MarginRow> = trace
        .final_margins
        .as_ref()
        .map(|m| {
            m.margins
                .iter()
                .zip(&labels)
                .enumerate()
                .map(|(sample, (margin, &label))| MarginRow { sample, label, margin: *margin })
                .collect()
        })
        .unwrap_or_default();
    let margins_path = dir.join(format!("{id}_margins.csv"));
    write_csv(&margins_path, &margins)?;

    Ok(RunRecord {
        metrics_path,
        margins_path,
        rows,
        first_perfect_iteration: trace.first_perfect_iteration,
        warnings: trace.warnings,
    })
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "run panicked".into())
}

fn summarise(cfg: &ExperimentConfig, runs: &[RunOutcome]) -> Vec<SummaryRow> {
    let mut checkpoints: Vec<usize> =
        cfg.checkpoints.iter().copied().filter(|&c| c <= cfg.train.iterations).collect();
    checkpoints.push(cfg.train.iterations);
    checkpoints.sort_unstable();
    checkpoints.dedup();

    let mut table = Vec::new();
    for &mode in &cfg.modes {
        let done: Vec<&RunRecord> =
            runs.iter().filter(|r| r.mode == mode).filter_map(|r| r.result.as_ref().ok()).collect();
        for &cp in &checkpoints {
            let at: Vec<&MetricsRow> =
                done.iter().filter_map(|r| r.rows.iter().rev().find(|row| row.iteration <= cp)).collect();
            for col in SUMMARY_COLUMNS {
                let vals: Vec<f64> = at.iter().filter_map(|r| r.value(col)).collect();
                if let Some((median, min, max)) = median_min_max(&vals) {
                    let runs = vals.iter().filter(|x| !x.is_nan()).count();
                    table.push(SummaryRow { mode: mode.to_string(), checkpoint: cp, column: col.into(), runs, median, min, max });
                }
            }
        }
    }
    table
}

/// Runs every `(mode, seed)` pair. A failing run is recorded in `runs.csv`
/// and does not stop the others; only I/O problems with the experiment
/// directory itself are returned as errors.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let dir = cfg.run_dir();
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let cfg_path = dir.join("config.toml");
    fs::write(&cfg_path, cfg.to_toml()).map_err(|e| CliError::io(&cfg_path, e))?;

    let jobs: Vec<(Mode, u64)> = cfg.modes.iter().flat_map(|&m| cfg.seeds.iter().map(move |&s| (m, s))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| CliError::Config(format!("worker pool: {e}")))?;
    let runs: Vec<RunOutcome> = pool.install(|| {
        jobs.par_iter()
            .map(|&(mode, seed)| {
                let result = match catch_unwind(AssertUnwindSafe(|| run_one(cfg, mode, seed))) {
                    Ok(r) => r.map_err(|e| e.to_string()),
                    Err(p) => Err(panic_message(p)),
                };
                RunOutcome { run_id: run_id(mode, seed), seed, mode, result }
            })
            .collect()
    });

    let index: Vec<RunIndexRow> = runs
        .iter()
        .map(|r| {
            let last = r.result.as_ref().ok().and_then(|rec| rec.rows.last());
            RunIndexRow {
                run_id: r.run_id.clone(),
                seed: r.seed,
                mode: r.mode.to_string(),
                status: if r.result.is_ok() { "ok" } else { "error" }.into(),
                first_perfect_iteration: r.result.as_ref().ok().and_then(|rec| rec.first_perfect_iteration),
                final_loss: last.map(|l| l.loss),
                final_train_top1: last.map(|l| l.train_top1),
                schema_version: SCHEMA_VERSION,
                error: r.result.as_ref().err().cloned(),
            }
        })
        .collect();
    write_csv(&dir.join("runs.csv"), &index)?;

    let table = summarise(cfg, &runs);
    write_csv(&dir.join("summary.csv"), &table)?;
    Ok(RunSummary { dir, runs, table })
}
