use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{fmt9, TrainConfig};
use crate::error::{Error, Result};
use crate::weighting::SampleWeightMatrix;

/// Evaluation snapshot taken every `eval_every` steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    /// Mean loss of every task over the full (possibly corrupted) training split.
    pub train_loss: Vec<f64>,
    pub val_main: f64,
    pub test_main: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightRow {
    pub step: usize,
    pub task: usize,
    /// `None` when the batch held no clean (resp. flagged) sample for the task.
    pub mean_clean: Option<f64>,
    pub mean_flagged: Option<f64>,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaylorRow {
    pub step: usize,
    pub exact: f64,
    pub approx: f64,
}

impl TaylorRow {
    pub fn residual(&self) -> f64 {
        (self.exact - self.approx).abs()
    }
}

/// Mean weight of clean and flagged samples, and the total, per task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskWeightSummary {
    pub mean_clean: Option<f64>,
    pub mean_flagged: Option<f64>,
    pub total: f64,
}

pub fn weight_distribution_summary(w: &SampleWeightMatrix, flags: &[Vec<bool>]) -> Result<Vec<TaskWeightSummary>> {
    if flags.len() != w.n_tasks() || flags.iter().any(|f| f.len() != w.n_batch()) {
        return Err(Error::Shape("corruption flags do not align with the weight matrix".into()));
    }
    Ok((0..w.n_tasks())
        .map(|i| {
            let (mut clean, mut n_clean, mut flagged, mut n_flagged) = (0.0, 0usize, 0.0, 0usize);
            for (j, &f) in flags[i].iter().enumerate() {
                if f {
                    flagged += w.get(i, j);
                    n_flagged += 1;
                } else {
                    clean += w.get(i, j);
                    n_clean += 1;
                }
            }
            TaskWeightSummary {
                mean_clean: (n_clean > 0).then(|| clean / n_clean as f64),
                mean_flagged: (n_flagged > 0).then(|| flagged / n_flagged as f64),
                total: clean + flagged,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    EarlyStopped { step: usize },
    Diverged { step: usize },
}

/// Operation counts for one run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OpCounts {
    /// Forward passes at the current parameters (training and validation batches).
    pub forward: usize,
    /// Backward passes over a whole batch.
    pub batch_backward: usize,
    /// Single `(task, sample)` backward passes.
    pub sample_backward: usize,
    /// Evaluations of the meta-objective at look-ahead parameters made by
    /// the weighting path.
    pub lookahead: usize,
    /// Look-ahead evaluations made only for the Taylor diagnostic.
    pub diagnostic_lookahead: usize,
    /// Steps whose SLGrad weights were all zero, so no update was applied.
    pub skipped_updates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub algorithm: String,
    pub setting: String,
    pub seed: u64,
    pub status: RunStatus,
    pub n_tasks: usize,
    pub metrics: Vec<MetricRow>,
    pub weights: Vec<WeightRow>,
    pub taylor: Vec<TaylorRow>,
    /// Main-task validation loss at the evaluation step with the lowest value.
    pub best_val_main: f64,
    pub best_step: usize,
    /// Main-task test metric at `best_step`.
    pub final_test_main: f64,
    pub ops: OpCounts,
}

impl RunRecord {
    pub fn succeeded(&self) -> bool {
        !matches!(self.status, RunStatus::Diverged { .. })
    }

    pub fn write_metrics_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let mut header = vec!["step".to_string()];
        header.extend((0..self.n_tasks).map(|i| format!("train_loss_task_{i}")));
        header.push("val_main".into());
        header.push("test_main".into());
        writeln!(w, "{}", header.join(","))?;
        for row in &self.metrics {
            let mut cells = vec![row.step.to_string()];
            cells.extend(row.train_loss.iter().map(|&v| fmt9(v)));
            cells.push(fmt9(row.val_main));
            cells.push(fmt9(row.test_main));
            writeln!(w, "{}", cells.join(","))?;
        }
        Ok(())
    }

    pub fn write_weights_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "step,task,mean_clean,mean_flagged,total")?;
        let opt = |v: Option<f64>| v.map(fmt9).unwrap_or_default();
        for r in &self.weights {
            writeln!(
                w,
                "{},{},{},{},{}",
                r.step,
                r.task,
                opt(r.mean_clean),
                opt(r.mean_flagged),
                fmt9(r.total)
            )?;
        }
        Ok(())
    }

    pub fn write_taylor_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "step,exact,approx,residual")?;
        for r in &self.taylor {
            writeln!(w, "{},{},{},{}", r.step, fmt9(r.exact), fmt9(r.approx), fmt9(r.residual()))?;
        }
        Ok(())
    }

    /// Writes `metrics.csv`, the echoed `config.txt`, `run.json`, and, when
    /// collected, `weights.csv` and `taylor.csv` into `dir`.
    pub fn write_outputs(&self, dir: &Path, config: &TrainConfig) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.write_metrics_csv(fs::File::create(dir.join("metrics.csv"))?)?;
        if !self.weights.is_empty() {
            self.write_weights_csv(fs::File::create(dir.join("weights.csv"))?)?;
        }
        if !self.taylor.is_empty() {
            self.write_taylor_csv(fs::File::create(dir.join("taylor.csv"))?)?;
        }
        fs::write(dir.join("config.txt"), config.to_text())?;
        let summary = serde_json::json!({
            "algorithm": self.algorithm,
            "setting": self.setting,
            "seed": self.seed,
            "status": self.status,
            "best_step": self.best_step,
            "best_val_main": fmt9(self.best_val_main),
            "final_test_main": fmt9(self.final_test_main),
            "ops": self.ops,
        });
        fs::write(dir.join("run.json"), serde_json::to_string_pretty(&summary)?)?;
        Ok(())
    }
}
