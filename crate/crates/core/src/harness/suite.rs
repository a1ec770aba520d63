//! Multi-seed suites and exhaustive grid search.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::train::{build_dataset, train_on};
use super::{fmt9, RunRecord, TrainConfig};
use crate::error::{Error, Result};

/// Final-test statistics of one `(algorithm, setting)` pair over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub algorithm: String,
    pub setting: String,
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator); 0 for a single run.
    pub std: f64,
    pub seeds: Vec<u64>,
    pub finals: Vec<f64>,
    pub failures: Vec<(u64, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub rows: Vec<SuiteRow>,
}

impl SuiteSummary {
    pub fn row(&self, algorithm: &str, setting: &str) -> Option<&SuiteRow> {
        self.rows.iter().find(|r| r.algorithm == algorithm && r.setting == setting)
    }

    /// JSON with every number printed to 9 significant digits.
    pub fn to_json(&self) -> Result<String> {
        let rows: Vec<_> = self
            .rows
            .iter()
            .map(|r| {
                serde_json::json!({
                    "algorithm": r.algorithm,
                    "setting": r.setting,
                    "mean": fmt9(r.mean),
                    "std": fmt9(r.std),
                    "seeds": r.seeds,
                    "finals": r.finals.iter().map(|&v| fmt9(v)).collect::<Vec<_>>(),
                    "failures": r.failures.iter().map(|(s, e)| serde_json::json!({"seed": s, "error": e})).collect::<Vec<_>>(),
                })
            })
            .collect();
        Ok(serde_json::to_string_pretty(&serde_json::json!({ "results": rows }))?)
    }

    pub fn write_table<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "algorithm,setting,mean,std,n_seeds,n_failed")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.algorithm,
                r.setting,
                fmt9(r.mean),
                fmt9(r.std),
                r.finals.len(),
                r.failures.len()
            )?;
        }
        Ok(())
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs `config` once per seed in parallel. Each entry keeps the record or
/// the error message.
pub fn run_seeds(config: &TrainConfig, seeds: &[u64]) -> Vec<(u64, std::result::Result<RunRecord, String>)> {
    let data = build_dataset(config);
    seeds
        .par_iter()
        .map(|&seed| {
            let cfg = TrainConfig { seed, ..config.clone() };
            let out = match &data {
                Ok(d) => train_on(&cfg, d).map_err(|e| e.to_string()),
                Err(e) => Err(e.to_string()),
            };
            (seed, out)
        })
        .collect()
}

fn summarize(config: &TrainConfig, runs: Vec<(u64, std::result::Result<RunRecord, String>)>) -> SuiteRow {
    let mut finals = Vec::new();
    let mut used = Vec::new();
    let mut failures = Vec::new();
    for (seed, run) in runs {
        match run {
            Ok(r) if r.succeeded() && r.final_test_main.is_finite() => {
                finals.push(r.final_test_main);
                used.push(seed);
            }
            Ok(r) => failures.push((seed, format!("{:?}", r.status))),
            Err(e) => failures.push((seed, e)),
        }
    }
    let (mean, std) = mean_std(&finals);
    SuiteRow {
        algorithm: config.algorithm().name().to_string(),
        setting: config.setting_label(),
        mean,
        std,
        seeds: used,
        finals,
        failures,
    }
}

/// Mean and spread of the final test metric for every config across seeds.
/// Failed runs are recorded and skipped.
pub fn run_suite(configs: &[TrainConfig], seeds: &[u64]) -> Result<SuiteSummary> {
    if configs.is_empty() || seeds.is_empty() {
        return Err(Error::Config("a suite needs at least one config and one seed".into()));
    }
    let rows = configs
        .par_iter()
        .map(|cfg| summarize(cfg, run_seeds(cfg, seeds)))
        .collect();
    Ok(SuiteSummary { rows })
}

/// Candidate values per hyperparameter; an empty list keeps the base value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub lr: Vec<f64>,
    pub batch_size: Vec<usize>,
    pub shared_layers: Vec<usize>,
    pub head_layers: Vec<usize>,
}

impl Grid {
    pub fn expand(&self, base: &TrainConfig) -> Vec<TrainConfig> {
        fn or<T: Clone>(v: &[T], d: T) -> Vec<T> {
            if v.is_empty() {
                vec![d]
            } else {
                v.to_vec()
            }
        }
        let mut out = Vec::new();
        for lr in or(&self.lr, base.lr) {
            for bs in or(&self.batch_size, base.batch_size) {
                for sl in or(&self.shared_layers, base.shared_layers) {
                    for tl in or(&self.head_layers, base.head_layers) {
                        out.push(TrainConfig {
                            lr,
                            batch_size: bs,
                            shared_layers: sl,
                            head_layers: tl,
                            ..base.clone()
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub best: TrainConfig,
    /// Every candidate with its best validation main-task loss on the
    /// selection seed (`inf` when the run failed).
    pub evaluated: Vec<(TrainConfig, f64)>,
    /// The chosen config re-run over all seeds.
    pub rerun: SuiteRow,
}

/// Picks the candidate with the lowest validation main-task loss on the
/// first seed, then re-runs it across all `seeds`. Ties go to the earlier
/// candidate.
pub fn grid_search(base: &TrainConfig, grid: &Grid, seeds: &[u64]) -> Result<GridResult> {
    let candidates = grid.expand(base);
    let selection_seed = *seeds
        .first()
        .ok_or_else(|| Error::Config("grid search needs at least one seed".into()))?;
    let data = build_dataset(base)?;
    let evaluated: Vec<(TrainConfig, f64)> = candidates
        .par_iter()
        .map(|c| {
            let cfg = TrainConfig {
                seed: selection_seed,
                ..c.clone()
            };
            let score = match train_on(&cfg, &data) {
                Ok(r) if r.succeeded() => r.best_val_main,
                _ => f64::INFINITY,
            };
            (c.clone(), score)
        })
        .collect();
    let mut best = 0;
    for (k, (_, v)) in evaluated.iter().enumerate() {
        if *v < evaluated[best].1 {
            best = k;
        }
    }
    let best_cfg = evaluated[best].0.clone();
    let rerun = summarize(&best_cfg, run_seeds(&best_cfg, seeds));
    Ok(GridResult {
        best: best_cfg,
        evaluated,
        rerun,
    })
}
