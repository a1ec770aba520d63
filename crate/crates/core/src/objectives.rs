//! Per-sample losses, their gradients with respect to the network output, and
//! the validation meta-objective.

use serde::{Deserialize, Serialize};

use crate::data::TaskBatch;
use crate::error::{Error, Result};
use crate::model::{MtlNetwork, ParamVector};
use crate::tensor::Matrix;

/// Loss attached to one task. Every kind reduces to one scalar per sample,
/// averaging over output dimensions where there is more than one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Mse,
    /// Targets in `[0, 1]`, predictions are logits.
    BceWithLogits,
    /// Target is a single class index stored as `f64`; predictions are one
    /// logit per class.
    CeWithLogits,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Mse => "mse",
            LossKind::BceWithLogits => "bce-with-logits",
            LossKind::CeWithLogits => "ce-with-logits",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(LossKind::Mse),
            "bce" | "bce-with-logits" => Ok(LossKind::BceWithLogits),
            "ce" | "ce-with-logits" => Ok(LossKind::CeWithLogits),
            other => Err(Error::Config(format!("unknown loss kind {other:?}"))),
        }
    }

    /// Width of the target row for a head with `out_dim` outputs.
    pub fn target_dim(self, out_dim: usize) -> usize {
        match self {
            LossKind::CeWithLogits => 1,
            _ => out_dim,
        }
    }
}

fn class_index(y: &[f64], n_classes: usize) -> Result<usize> {
    match y {
        [c] if *c >= 0.0 && c.fract() == 0.0 && (*c as usize) < n_classes => Ok(*c as usize),
        _ => Err(Error::Config(format!(
            "invalid class target {y:?} for {n_classes} classes"
        ))),
    }
}

fn check_dims(kind: LossKind, y: &[f64], yhat: &[f64]) -> Result<()> {
    if kind != LossKind::CeWithLogits && y.len() != yhat.len() {
        return Err(Error::Shape(format!(
            "{} target has {} entries, prediction {}",
            kind.name(),
            y.len(),
            yhat.len()
        )));
    }
    if yhat.is_empty() {
        return Err(Error::Shape("empty prediction".into()));
    }
    Ok(())
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Loss of one sample.
pub fn loss_value(kind: LossKind, y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_dims(kind, y, yhat)?;
    let k = yhat.len() as f64;
    Ok(match kind {
        LossKind::Mse => y.iter().zip(yhat).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / k,
        LossKind::BceWithLogits => {
            y.iter()
                .zip(yhat)
                .map(|(&t, &z)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
                .sum::<f64>()
                / k
        }
        LossKind::CeWithLogits => {
            let c = class_index(y, yhat.len())?;
            log_sum_exp(yhat) - yhat[c]
        }
    })
}

/// Gradient of [`loss_value`] with respect to `yhat`.
pub fn loss_grad_wrt_prediction(kind: LossKind, y: &[f64], yhat: &[f64]) -> Result<Vec<f64>> {
    check_dims(kind, y, yhat)?;
    let k = yhat.len() as f64;
    Ok(match kind {
        LossKind::Mse => y.iter().zip(yhat).map(|(t, p)| 2.0 * (p - t) / k).collect(),
        LossKind::BceWithLogits => y
            .iter()
            .zip(yhat)
            .map(|(&t, &z)| (sigmoid(z) - t) / k)
            .collect(),
        LossKind::CeWithLogits => {
            let c = class_index(y, yhat.len())?;
            let lse = log_sum_exp(yhat);
            let mut g: Vec<f64> = yhat.iter().map(|z| (z - lse).exp()).collect();
            g[c] -= 1.0;
            g
        }
    })
}

/// Mean per-sample loss of `preds` against `targets`, row by row.
pub fn mean_loss(kind: LossKind, targets: &Matrix, preds: &Matrix) -> Result<f64> {
    if targets.rows() != preds.rows() || targets.rows() == 0 {
        return Err(Error::Shape(format!(
            "{} targets vs {} predictions",
            targets.rows(),
            preds.rows()
        )));
    }
    let mut total = 0.0;
    for r in 0..targets.rows() {
        total += loss_value(kind, targets.row(r), preds.row(r))?;
    }
    Ok(total / targets.rows() as f64)
}

/// The main-task validation loss used as meta-objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaObjective {
    pub main_task: usize,
}

impl MetaObjective {
    pub fn new(main_task: usize) -> Self {
        MetaObjective { main_task }
    }

    /// Mean main-task loss on `batch`.
    pub fn value(&self, net: &MtlNetwork, batch: &TaskBatch, losses: &[LossKind]) -> Result<f64> {
        self.check(net, batch, losses)?;
        let (preds, _) = net.forward(&batch.x)?;
        mean_loss(
            losses[self.main_task],
            &batch.targets[self.main_task],
            &preds[self.main_task],
        )
    }

    fn check(&self, net: &MtlNetwork, batch: &TaskBatch, losses: &[LossKind]) -> Result<()> {
        if batch.len() == 0 {
            return Err(Error::Config("empty validation batch".into()));
        }
        if self.main_task >= net.n_tasks() || self.main_task >= losses.len() {
            return Err(Error::Config(format!(
                "main task {} out of range",
                self.main_task
            )));
        }
        if batch.targets.len() <= self.main_task {
            return Err(Error::Config("validation batch lacks main-task targets".into()));
        }
        Ok(())
    }
}

/// Gradient of the mean main-task loss over `val_batch`. Auxiliary-head
/// segments are zero.
pub fn validation_gradient(
    net: &MtlNetwork,
    val_batch: &TaskBatch,
    meta: &MetaObjective,
    losses: &[LossKind],
) -> Result<ParamVector> {
    meta.check(net, val_batch, losses)?;
    let (preds, trace) = net.forward(&val_batch.x)?;
    let n = val_batch.len();
    let kind = losses[meta.main_task];
    let out_dim = net.output_dims()[meta.main_task];
    let mut seed = Matrix::zeros(n, out_dim);
    for j in 0..n {
        let g = loss_grad_wrt_prediction(
            kind,
            val_batch.targets[meta.main_task].row(j),
            preds[meta.main_task].row(j),
        )?;
        for (dst, v) in seed.row_mut(j).iter_mut().zip(g) {
            *dst = v / n as f64;
        }
    }
    let mut seeds: Vec<Option<Matrix>> = vec![None; net.n_tasks()];
    seeds[meta.main_task] = Some(seed);
    net.batch_backward(&trace, &seeds)
}
