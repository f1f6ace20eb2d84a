//! Experiment configuration: one TOML file per experiment, overridable from
//! the command line.
//!
//! ```toml
//! name = "ufm10"
//! preset = "ufm10"                       # or { custom = { d = 8, c = 3, n = 30 } }
//! modes = ["standard", "fixed_etf", "implicit_etf"]
//! seeds = [0, 1, 2, 3, 4]
//! checkpoints = [500, 2000]
//! output_dir = "runs"
//! log_interval = 10
//! workers = 0                            # 0: one per core
//!
//! [train]                                # any TrainConfig field
//! iterations = 2000
//! learning_rate = 0.01
//! ```
//!
//! `train.seed` and `train.log_interval` are replaced by the run seed and the
//! top-level `log_interval`.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use nearest_etf::ufm::{Mode, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Environment variable that replaces `output_dir` unless a flag is given.
pub const OUTPUT_DIR_ENV: &str = "NETF_OUTPUT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Ufm10,
    Ufm100,
    Ufm200,
    Ufm1000,
    Custom { d: usize, c: usize, n: usize },
}

impl Preset {
    /// `(d, C, N)`.
    pub fn dims(self) -> (usize, usize, usize) {
        match self {
            Preset::Ufm10 => (512, 10, 1000),
            Preset::Ufm100 => (1024, 100, 5000),
            Preset::Ufm200 => (1024, 200, 5000),
            Preset::Ufm1000 => (1024, 1000, 10000),
            Preset::Custom { d, c, n } => (d, c, n),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub preset: Preset,
    pub modes: Vec<Mode>,
    pub seeds: Vec<u64>,
    /// Iterations reported in the summary table.
    pub checkpoints: Vec<usize>,
    pub output_dir: PathBuf,
    pub log_interval: usize,
    pub workers: usize,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "ufm10".into(),
            preset: Preset::Ufm10,
            modes: Mode::ALL.to_vec(),
            seeds: (0..5).collect(),
            checkpoints: vec![500, 2000],
            output_dir: PathBuf::from("runs"),
            log_interval: 10,
            workers: 0,
            train: TrainConfig::default(),
        }
    }
}

/// Command-line values that win over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub output_dir: Option<PathBuf>,
    pub seeds: Option<Vec<u64>>,
    pub modes: Option<Vec<Mode>>,
    pub iterations: Option<usize>,
    pub log_interval: Option<usize>,
    pub workers: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    /// Flags first, then the environment, then the file.
    pub fn apply(&mut self, o: &Overrides, env_output_dir: Option<PathBuf>) {
        if let Some(dir) = o.output_dir.clone().or(env_output_dir) {
            self.output_dir = dir;
        }
        if let Some(s) = &o.seeds {
            self.seeds = s.clone();
        }
        if let Some(m) = &o.modes {
            self.modes = m.clone();
        }
        if let Some(n) = o.iterations {
            self.train.iterations = n;
        }
        if let Some(n) = o.log_interval {
            self.log_interval = n;
        }
        if let Some(n) = o.workers {
            self.workers = n;
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.name.is_empty() || !self.name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
            return bad(format!("name `{}` must be non-empty and use [A-Za-z0-9._-]", self.name));
        }
        let (d, c, n) = self.preset.dims();
        if c < 2 || d < c || n < c {
            return bad(format!("need 2 <= C <= d and N >= C, got d={d} C={c} N={n}"));
        }
        if self.modes.is_empty() || self.seeds.is_empty() {
            return bad("at least one mode and one seed are required".into());
        }
        if self.modes.iter().collect::<HashSet<_>>().len() != self.modes.len() {
            return bad("modes repeat".into());
        }
        if self.seeds.iter().collect::<HashSet<_>>().len() != self.seeds.len() {
            return bad("seeds repeat".into());
        }
        if self.log_interval == 0 {
            return bad("log_interval must be at least 1".into());
        }
        self.train_config(0).validate().map_err(|e| CliError::Config(e.to_string()))
    }

    /// The training config of one run.
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig { seed, log_interval: self.log_interval, ..self.train.clone() }
    }

    /// Where this experiment writes: `output_dir/name`.
    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.name)
    }
}

pub fn parse_modes(s: &str) -> Result<Vec<Mode>> {
    s.split(',')
        .map(|m| m.trim().parse::<Mode>().map_err(|e| CliError::Config(e.to_string())))
        .collect()
}

pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    s.split(',')
        .map(|x| x.trim().parse::<u64>().map_err(|_| CliError::Config(format!("bad seed `{x}`"))))
        .collect()
}
