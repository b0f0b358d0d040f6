//! The standard experiment set: four modes over three seeds, plus the
//! where (block) and when (frequency) ablations.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use salguide_core::domains::TARGET_DOMAINS;
use salguide_core::{Mode, TrainConfig};

use crate::error::{HarnessError, Result};
use crate::pool::map_jobs;
use crate::report::{last_epochs_mean, LAST_EPOCHS};
use crate::run::{execute, RunData, RunOutcome, RunSpec};

pub const DEFAULT_SEEDS: [u64; 3] = [0, 1, 2];
pub const WHEN_FREQS: [usize; 3] = [5, 10, 15];

/// Shared hyperparameters for every run of an experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolSettings {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub freq: usize,
    pub num_blocks: usize,
    pub seeds: Vec<u64>,
    pub eval_targets_last: usize,
}

impl ProtocolSettings {
    pub fn train_config(&self, mode: Mode, seed: u64) -> TrainConfig {
        let mut c = TrainConfig::new(mode, self.num_blocks, seed);
        c.epochs = self.epochs;
        c.learning_rate = self.learning_rate;
        c.batch_size = self.batch_size;
        c.freq = self.freq;
        c
    }

    pub fn spec(&self, c: TrainConfig, data_root: &Path) -> RunSpec {
        let mut s = RunSpec::new(c, data_root);
        s.eval_targets_last = self.eval_targets_last;
        s
    }

    /// Every mode at every seed.
    pub fn main_specs(&self, data_root: &Path) -> Vec<RunSpec> {
        Mode::ALL
            .iter()
            .flat_map(|&m| self.seeds.iter().map(move |&s| (m, s)))
            .map(|(m, s)| self.spec(self.train_config(m, s), data_root))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Where,
    When,
}

impl FromStr for Axis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "where" => Ok(Axis::Where),
            "when" => Ok(Axis::When),
            _ => Err(format!("unknown axis {s:?} (expected where or when)")),
        }
    }
}

/// (column label, run) for each cell column of an ablation table.
pub fn ablation_specs(axis: Axis, settings: &ProtocolSettings, seed: u64, data_root: &Path) -> Vec<(String, RunSpec)> {
    match axis {
        Axis::Where => (1..=settings.num_blocks)
            .map(|b| {
                let mut c = settings.train_config(Mode::Xai, seed);
                c.xai_block = b;
                (format!("block{b}"), settings.spec(c, data_root))
            })
            .collect(),
        Axis::When => WHEN_FREQS
            .iter()
            .map(|&f| {
                let mut c = settings.train_config(Mode::Xai, seed);
                c.freq = f;
                (format!("freq{f}"), settings.spec(c, data_root))
            })
            .collect(),
    }
}

/// Runs every spec (in parallel up to the worker cap), in order.
pub fn run_all(specs: &[RunSpec], data: &RunData, runs_root: &Path, reuse: bool) -> Result<Vec<RunOutcome>> {
    map_jobs(specs.iter().collect(), |s| execute(s, data, runs_root, reuse))
        .into_iter()
        .collect()
}

/// Domain rows × setting columns of last-epoch mean accuracy (percent).
#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
}

impl AblationTable {
    pub fn build(columns: Vec<String>, outcomes: &[&RunOutcome]) -> Result<Self> {
        let mut rows = Vec::new();
        for d in TARGET_DOMAINS {
            let cells = outcomes
                .iter()
                .map(|o| {
                    last_epochs_mean(&o.rows, d, LAST_EPOCHS)
                        .map(|(m, _)| 100.0 * m)
                        .ok_or_else(|| HarnessError::Usage(format!("run {} has no rows for {d}", o.dir.display())))
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push((d.to_string(), cells));
        }
        Ok(Self { columns, rows })
    }

    pub fn cell(&self, domain: &str, column: &str) -> Option<f64> {
        let c = self.columns.iter().position(|x| x == column)?;
        self.rows.iter().find(|(d, _)| d == domain).map(|(_, v)| v[c])
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("domain,{}\n", self.columns.join(","));
        for (d, cells) in &self.rows {
            let vals: Vec<String> = cells.iter().map(|v| format!("{v:.2}")).collect();
            let _ = writeln!(out, "{d},{}", vals.join(","));
        }
        out
    }
}

/// Trains an ablation axis and tabulates it.
pub fn run_ablation(
    axis: Axis,
    settings: &ProtocolSettings,
    seed: u64,
    data: &RunData,
    data_root: &Path,
    runs_root: &Path,
    reuse: bool,
) -> Result<AblationTable> {
    let cells = ablation_specs(axis, settings, seed, data_root);
    let specs: Vec<RunSpec> = cells.iter().map(|(_, s)| s.clone()).collect();
    let outcomes = run_all(&specs, data, runs_root, reuse)?;
    AblationTable::build(cells.into_iter().map(|(c, _)| c).collect(), &outcomes.iter().collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn settings() -> ProtocolSettings {
        ProtocolSettings {
            epochs: 50,
            learning_rate: 1e-3,
            batch_size: 32,
            freq: 5,
            num_blocks: 4,
            seeds: DEFAULT_SEEDS.to_vec(),
            eval_targets_last: 4,
        }
    }

    #[test]
    fn main_specs_cover_modes_and_seeds() {
        let specs = settings().main_specs(Path::new("d"));
        assert_eq!(specs.len(), 12);
        let ids: std::collections::HashSet<_> = specs.iter().map(|s| s.run_id.clone()).collect();
        assert_eq!(ids.len(), 12);
    }

    #[test]
    fn ablation_cells_share_ids_with_main_runs() {
        let s = settings();
        let main: Vec<String> = s.main_specs(Path::new("d")).into_iter().map(|r| r.run_id).collect();
        let w = ablation_specs(Axis::Where, &s, 0, Path::new("d"));
        let h = ablation_specs(Axis::When, &s, 0, Path::new("d"));
        assert_eq!(w.len(), 4);
        assert_eq!(h.len(), 3);
        assert!(main.contains(&w[3].1.run_id));
        assert!(main.contains(&h[0].1.run_id));
        assert_eq!(w[3].1, h[0].1);
    }
}
