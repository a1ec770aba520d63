//! The training loop shared by every weighting algorithm.
//!
//! Each step samples a training and a validation batch, builds whatever the
//! weighting algorithm needs (per-sample gradients plus the validation
//! gradient for SLGrad, per-task mean gradients for the task-level
//! baselines), asks the weighter for weights or a direction, and takes one
//! SGD step.

use crate::data::{generate_classify, generate_toy, next_batch, Dataset, TaskBatch};
use crate::error::{Error, Result};
use crate::model::{
    init_network, per_sample_task_gradients, sgd_step, weighted_total_gradient, ForwardTrace, MtlNetwork, ParamVector,
};
use crate::objectives::{loss_grad_wrt_prediction, loss_value, mean_loss, validation_gradient, LossKind, MetaObjective};
use crate::tensor::{Matrix, Rng};
use crate::weighting::{SampleWeightMatrix, StepDirective, Weighter, WeightingContext};

use super::record::{weight_distribution_summary, MetricRow, OpCounts, RunRecord, RunStatus, TaylorRow, WeightRow};
use super::{DatasetKind, TrainConfig};

pub fn build_dataset(config: &TrainConfig) -> Result<Dataset> {
    match config.dataset {
        DatasetKind::Toy => generate_toy(&config.toy_spec()),
        DatasetKind::Classify => generate_classify(&config.classify_spec()),
    }
}

/// Exact and first-order change of `objective` under `theta - eta * update`,
/// where `grad` is the objective's gradient at `theta`.
pub fn taylor_deltas<F>(
    objective: F,
    theta: &ParamVector,
    grad: &ParamVector,
    update: &ParamVector,
    eta: f64,
) -> Result<(f64, f64)>
where
    F: Fn(&ParamVector) -> Result<f64>,
{
    let stepped = sgd_step(theta, update, eta)?;
    let exact = objective(&stepped)? - objective(theta)?;
    let approx = -eta * grad.dot(update)?;
    Ok((exact, approx))
}

/// `(exact, approx)` change of the main-task loss on `val_batch` when the
/// network takes the step `-eta * update`. The exact value comes from a
/// throwaway copy of the network.
pub fn taylor_residual(
    net: &MtlNetwork,
    update: &ParamVector,
    val_batch: &TaskBatch,
    meta: &MetaObjective,
    losses: &[LossKind],
    eta: f64,
) -> Result<(f64, f64)> {
    let grad = validation_gradient(net, val_batch, meta, losses)?;
    taylor_deltas(
        |p| meta.value(&net.with_params(p)?, val_batch, losses),
        &net.flatten(),
        &grad,
        update,
        eta,
    )
}

fn evaluate(net: &MtlNetwork, data: &Dataset, step: usize) -> Result<MetricRow> {
    let train_preds = net.predict(&data.train.x)?;
    let train_loss = (0..data.n_tasks())
        .map(|t| mean_loss(data.losses[t], &data.train.targets[t], &train_preds[t]))
        .collect::<Result<Vec<_>>>()?;
    let m = data.main_task;
    let val_main = mean_loss(data.losses[m], &data.val.targets[m], &net.predict(&data.val.x)?[m])?;
    let test_main = mean_loss(data.losses[m], &data.test.targets[m], &net.predict(&data.test.x)?[m])?;
    Ok(MetricRow {
        step,
        train_loss,
        val_main,
        test_main,
    })
}

/// One forward pass over a training batch with the per-sample output
/// gradients of every task.
struct BatchPass {
    trace: ForwardTrace,
    output_grads: Vec<Matrix>,
    task_losses: Vec<f64>,
}

impl BatchPass {
    fn new(net: &MtlNetwork, batch: &TaskBatch, losses: &[LossKind]) -> Result<Self> {
        let (preds, trace) = net.forward(&batch.x)?;
        let n = batch.len();
        let mut output_grads = Vec::with_capacity(preds.len());
        let mut task_losses = Vec::with_capacity(preds.len());
        for (t, p) in preds.iter().enumerate() {
            let mut seed = Matrix::zeros(n, p.cols());
            let mut total = 0.0;
            for j in 0..n {
                let y = batch.targets[t].row(j);
                total += loss_value(losses[t], y, p.row(j))?;
                seed.row_mut(j).copy_from_slice(&loss_grad_wrt_prediction(losses[t], y, p.row(j))?);
            }
            task_losses.push(total / n as f64);
            output_grads.push(seed);
        }
        Ok(BatchPass {
            trace,
            output_grads,
            task_losses,
        })
    }

    /// Gradient of `sum_ij w_ij L_ij` through the batch trace.
    fn weighted_gradient(&self, net: &MtlNetwork, w: &Matrix) -> Result<ParamVector> {
        let seeds = self
            .output_grads
            .iter()
            .enumerate()
            .map(|(t, g)| {
                let mut s = g.clone();
                for j in 0..s.rows() {
                    let wij = w.get(t, j);
                    s.row_mut(j).iter_mut().for_each(|v| *v *= wij);
                }
                Some(s)
            })
            .collect::<Vec<_>>();
        net.batch_backward(&self.trace, &seeds)
    }

    /// Mean-over-samples gradient of each task's loss.
    fn task_mean_gradients(&self, net: &MtlNetwork) -> Result<Vec<ParamVector>> {
        let n_tasks = self.output_grads.len();
        (0..n_tasks)
            .map(|t| {
                let mut seeds: Vec<Option<Matrix>> = vec![None; n_tasks];
                let mut s = self.output_grads[t].clone();
                let n = s.rows() as f64;
                s.data_mut().iter_mut().for_each(|v| *v /= n);
                seeds[t] = Some(s);
                net.batch_backward(&self.trace, &seeds)
            })
            .collect()
    }
}

fn diverged(loss: f64, threshold: f64) -> bool {
    !loss.is_finite() || loss > threshold
}

/// Runs one training job end to end.
pub fn train(config: &TrainConfig) -> Result<RunRecord> {
    let data = build_dataset(config)?;
    train_on(config, &data)
}

/// Runs one training job on an already generated dataset.
pub fn train_on(config: &TrainConfig, data: &Dataset) -> Result<RunRecord> {
    config.validate()?;
    let n_tasks = data.n_tasks();
    let main = config.weighting.main_task;
    if main >= n_tasks {
        return Err(Error::Config(format!("main task {main} but only {n_tasks} tasks")));
    }
    let arch = config.architecture(data.input_dim(), data.output_dims.clone());
    let mut net = init_network(&arch, &mut Rng::derive(config.seed, "init"))?;
    let mut batch_rng = Rng::derive(config.seed, "batch");
    let mut val_rng = Rng::derive(config.seed, "val-batch");
    let mut weighter = Weighter::new(config.weighting.clone(), n_tasks, config.seed);
    let meta = MetaObjective::new(main);
    let algorithm = config.algorithm();
    let needs_val = algorithm.needs_sample_grads() || config.taylor_check;

    let mut record = RunRecord {
        algorithm: algorithm.name().to_string(),
        setting: config.setting_label(),
        seed: config.seed,
        status: RunStatus::Completed,
        n_tasks,
        metrics: Vec::new(),
        weights: Vec::new(),
        taylor: Vec::new(),
        best_val_main: f64::INFINITY,
        best_step: 0,
        final_test_main: f64::NAN,
        ops: OpCounts::default(),
    };

    let mut step = 0;
    loop {
        if step % config.eval_every == 0 || step == config.steps {
            let row = evaluate(&net, data, step)?;
            if diverged(row.val_main, config.divergence_threshold)
                || row.train_loss.iter().any(|&l| diverged(l, config.divergence_threshold))
            {
                record.status = RunStatus::Diverged { step };
                record.metrics.push(row);
                break;
            }
            if row.val_main < record.best_val_main {
                record.best_val_main = row.val_main;
                record.best_step = step;
                record.final_test_main = row.test_main;
            }
            record.metrics.push(row);
            if config.patience > 0 && step - record.best_step >= config.patience && step < config.steps {
                record.status = RunStatus::EarlyStopped { step };
                break;
            }
        }
        if step == config.steps {
            break;
        }

        let batch = next_batch(&data.train, config.batch_size, &mut batch_rng)?;
        let val_batch = next_batch(&data.val, config.effective_val_batch(), &mut val_rng)?;
        let val_grad = if needs_val {
            record.ops.forward += 1;
            record.ops.batch_backward += 1;
            Some(validation_gradient(&net, &val_batch, &meta, &data.losses)?)
        } else {
            None
        };

        let (update, weights, batch_losses) = if algorithm.needs_sample_grads() {
            let grads = per_sample_task_gradients(&net, &batch, &data.losses)?;
            record.ops.forward += 1;
            record.ops.sample_backward += grads.n_tasks() * grads.n_batch();
            let task_losses = grads.task_losses();
            let ctx = WeightingContext {
                n_tasks,
                n_batch: batch.len(),
                sample_grads: Some(&grads),
                task_grads: None,
                val_grad: val_grad.as_ref(),
                task_losses: Some(&task_losses),
            };
            match weighter.compute_step_weights(&ctx)? {
                StepDirective::Weights(w) => (weighted_total_gradient(&grads, &w)?, Some(w), task_losses),
                StepDirective::Direction(d) => (d, None, task_losses),
            }
        } else {
            let pass = BatchPass::new(&net, &batch, &data.losses)?;
            record.ops.forward += 1;
            let task_grads = if algorithm.needs_task_grads() {
                record.ops.batch_backward += n_tasks;
                Some(pass.task_mean_gradients(&net)?)
            } else {
                None
            };
            let ctx = WeightingContext {
                n_tasks,
                n_batch: batch.len(),
                sample_grads: None,
                task_grads: task_grads.as_deref(),
                val_grad: val_grad.as_ref(),
                task_losses: Some(&pass.task_losses),
            };
            match weighter.compute_step_weights(&ctx)? {
                StepDirective::Weights(w) => {
                    record.ops.batch_backward += 1;
                    (pass.weighted_gradient(&net, w.as_matrix())?, Some(w), pass.task_losses)
                }
                StepDirective::Direction(d) => (d, None, pass.task_losses),
            }
        };

        if batch_losses.iter().any(|&l| diverged(l, config.divergence_threshold)) {
            record.status = RunStatus::Diverged { step };
            break;
        }

        if let (true, Some(w)) = (config.log_weights, weights.as_ref()) {
            log_weights(&mut record, step, w, &batch)?;
        }
        let skip = weights.as_ref().is_some_and(SampleWeightMatrix::is_zero);
        if skip {
            record.ops.skipped_updates += 1;
        }

        if config.taylor_check {
            let (exact, approx) = taylor_residual(&net, &update, &val_batch, &meta, &data.losses, config.lr)?;
            record.ops.diagnostic_lookahead += 1;
            record.taylor.push(TaylorRow { step, exact, approx });
        }

        if !skip {
            let theta = sgd_step(&net.flatten(), &update, config.lr)?;
            if !theta.is_finite() {
                record.status = RunStatus::Diverged { step };
                break;
            }
            net.load(&theta)?;
        }
        step += 1;
    }
    Ok(record)
}

fn log_weights(record: &mut RunRecord, step: usize, w: &SampleWeightMatrix, batch: &TaskBatch) -> Result<()> {
    for (task, s) in weight_distribution_summary(w, &batch.corrupted)?.into_iter().enumerate() {
        record.weights.push(WeightRow {
            step,
            task,
            mean_clean: s.mean_clean,
            mean_flagged: s.mean_flagged,
            total: s.total,
        });
    }
    Ok(())
}
