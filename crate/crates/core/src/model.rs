//! Hard-parameter-sharing feedforward network with hand-written backprop.
//!
//! Parameters are laid out as one flat vector: shared layers first, then each
//! task head in task order; within a layer the weight matrix (row-major,
//! `out x in`) precedes the bias. Per-sample gradients are full-length
//! vectors over that layout, so they can be dotted against each other and
//! against the validation gradient directly.

use std::ops::Range;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::TaskBatch;
use crate::error::{Error, Result};
use crate::objectives::{loss_grad_wrt_prediction, loss_value, LossKind};
use crate::tensor::{dot_slices, Matrix, Rng, Vector};
use crate::weighting::SampleWeightMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            "identity" | "linear" => Ok(Activation::Identity),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation and the output.
    fn derivative(self, pre: f64, act: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - act * act,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Layer widths and activations. Each head is `head_hidden` followed by a
/// linear output layer of width `output_dims[task]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub shared: Vec<usize>,
    pub head_hidden: Vec<usize>,
    pub output_dims: Vec<usize>,
    pub shared_activation: Activation,
    pub head_activation: Activation,
}

impl Architecture {
    /// `n_shared` trunk layers of 64 and `n_head` head layers of 32, the
    /// widths used for the toy regression study.
    pub fn toy(input_dim: usize, output_dims: Vec<usize>, n_shared: usize, n_head: usize) -> Self {
        Architecture {
            input_dim,
            shared: vec![64; n_shared],
            head_hidden: vec![32; n_head],
            output_dims,
            shared_activation: Activation::Tanh,
            head_activation: Activation::Relu,
        }
    }

    pub fn n_tasks(&self) -> usize {
        self.output_dims.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        if self.shared.is_empty() {
            return Err(Error::Config("at least one shared layer is required".into()));
        }
        if self.output_dims.is_empty() {
            return Err(Error::Config("at least one task head is required".into()));
        }
        if self.shared.iter().chain(&self.head_hidden).chain(&self.output_dims).any(|&w| w == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }

    /// `(fan_in, fan_out, activation)` for every layer in layout order.
    fn layer_shapes(&self) -> Vec<(usize, usize, Activation)> {
        let mut shapes = Vec::new();
        let mut fan_in = self.input_dim;
        for &w in &self.shared {
            shapes.push((fan_in, w, self.shared_activation));
            fan_in = w;
        }
        let trunk_out = fan_in;
        for &out in &self.output_dims {
            let mut fan_in = trunk_out;
            for &w in &self.head_hidden {
                shapes.push((fan_in, w, self.head_activation));
                fan_in = w;
            }
            shapes.push((fan_in, out, Activation::Identity));
        }
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o, _)| i * o + o).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentOwner {
    Shared(usize),
    Head { task: usize, layer: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentKind {
    Weight,
    Bias,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub owner: SegmentOwner,
    pub kind: SegmentKind,
    pub range: Range<usize>,
}

/// Maps flat parameter offsets to layers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    segments: Vec<Segment>,
    shared: Range<usize>,
    heads: Vec<Range<usize>>,
    len: usize,
}

impl Layout {
    fn new(arch: &Architecture) -> Self {
        let mut segments = Vec::new();
        let mut off = 0;
        let mut push = |owner, rows: usize, cols: usize, off: &mut usize| {
            segments.push(Segment {
                owner,
                kind: SegmentKind::Weight,
                range: *off..*off + rows * cols,
            });
            *off += rows * cols;
            segments.push(Segment {
                owner,
                kind: SegmentKind::Bias,
                range: *off..*off + rows,
            });
            *off += rows;
        };
        let mut fan_in = arch.input_dim;
        for (l, &w) in arch.shared.iter().enumerate() {
            push(SegmentOwner::Shared(l), w, fan_in, &mut off);
            fan_in = w;
        }
        let shared = 0..off;
        let trunk_out = fan_in;
        let mut heads = Vec::new();
        for (task, &out) in arch.output_dims.iter().enumerate() {
            let start = off;
            let mut fan_in = trunk_out;
            for (layer, &w) in arch.head_hidden.iter().chain(std::iter::once(&out)).enumerate() {
                push(SegmentOwner::Head { task, layer }, w, fan_in, &mut off);
                fan_in = w;
            }
            heads.push(start..off);
        }
        Layout {
            segments,
            shared,
            heads,
            len: off,
        }
    }

    /// Layout of a plain vector with no layer structure; every entry counts
    /// as shared.
    pub fn flat(len: usize) -> Self {
        Layout {
            segments: vec![Segment {
                owner: SegmentOwner::Shared(0),
                kind: SegmentKind::Weight,
                range: 0..len,
            }],
            shared: 0..len,
            heads: Vec::new(),
            len,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn shared_range(&self) -> Range<usize> {
        self.shared.clone()
    }

    pub fn head_range(&self, task: usize) -> Range<usize> {
        self.heads[task].clone()
    }
}

/// Flat parameters or gradient together with the layout they follow.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vector,
    layout: Arc<Layout>,
}

impl ParamVector {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        ParamVector {
            values: Vector::zeros(layout.len()),
            layout,
        }
    }

    pub fn from_values(layout: Arc<Layout>, values: Vector) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::Shape(format!(
                "parameter vector of length {} for layout of {}",
                values.len(),
                layout.len()
            )));
        }
        Ok(ParamVector { values, layout })
    }

    pub fn values(&self) -> &Vector {
        &self.values
    }

    pub fn as_slice(&self) -> &[f64] {
        self.values.as_slice()
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        self.values.as_mut_slice()
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn check_compatible(&self, other: &ParamVector) -> Result<()> {
        if !Arc::ptr_eq(&self.layout, &other.layout) && self.layout != other.layout {
            return Err(Error::Shape("parameter layouts differ".into()));
        }
        Ok(())
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        self.check_compatible(other)?;
        Ok(dot_slices(self.as_slice(), other.as_slice()))
    }

    pub fn norm(&self) -> f64 {
        self.values.norm()
    }

    pub fn scale(&self, alpha: f64) -> ParamVector {
        ParamVector {
            values: self.values.scale(alpha),
            layout: self.layout.clone(),
        }
    }

    /// `self += alpha * x`.
    pub fn add_scaled(&mut self, alpha: f64, x: &ParamVector) -> Result<()> {
        self.check_compatible(x)?;
        self.values.add_scaled(alpha, &x.values)
    }

    pub fn shared_segment(&self) -> &[f64] {
        &self.as_slice()[self.layout.shared_range()]
    }

    pub fn head_segment(&self, task: usize) -> &[f64] {
        &self.as_slice()[self.layout.head_range(task)]
    }

    pub fn is_finite(&self) -> bool {
        self.values.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    fn forward(&self, input: &Matrix) -> LayerTrace {
        let n = input.rows();
        let out = self.weights.rows();
        let mut pre = Matrix::zeros(n, out);
        let mut act = Matrix::zeros(n, out);
        for r in 0..n {
            let a = input.row(r);
            for o in 0..out {
                let z = self.bias[o] + dot_slices(self.weights.row(o), a);
                pre.set(r, o, z);
                act.set(r, o, self.activation.apply(z));
            }
        }
        LayerTrace { pre, act }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub pre: Matrix,
    pub act: Matrix,
}

/// Activations retained from one forward pass over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub input: Matrix,
    pub shared: Vec<LayerTrace>,
    pub heads: Vec<Vec<LayerTrace>>,
}

impl ForwardTrace {
    pub fn batch_len(&self) -> usize {
        self.input.rows()
    }

    fn trunk_output(&self) -> &Matrix {
        &self.shared.last().expect("at least one shared layer").act
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MtlNetwork {
    arch: Architecture,
    layout: Arc<Layout>,
    shared: Vec<DenseLayer>,
    heads: Vec<Vec<DenseLayer>>,
}

/// Builds a network with Glorot-uniform weights and zero biases. Weights are
/// drawn layer by layer in layout order.
pub fn init_network(arch: &Architecture, rng: &mut Rng) -> Result<MtlNetwork> {
    arch.validate()?;
    let layout = Arc::new(Layout::new(arch));
    let mut layers = arch.layer_shapes().into_iter().map(|(fan_in, fan_out, activation)| {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.uniform(-bound, bound)).collect();
        DenseLayer {
            weights: Matrix::from_vec(fan_out, fan_in, data).expect("sized by construction"),
            bias: vec![0.0; fan_out],
            activation,
        }
    });
    let shared = layers.by_ref().take(arch.shared.len()).collect();
    let per_head = arch.head_hidden.len() + 1;
    let heads = (0..arch.n_tasks())
        .map(|_| layers.by_ref().take(per_head).collect())
        .collect();
    Ok(MtlNetwork {
        arch: arch.clone(),
        layout,
        shared,
        heads,
    })
}

/// Per-sample, per-task gradients on one batch.
#[derive(Debug, Clone)]
pub struct SampleGradients {
    n_tasks: usize,
    n_batch: usize,
    grads: Vec<ParamVector>,
    /// Unweighted per-sample losses, `n_tasks x n_batch`.
    pub losses: Matrix,
}

impl SampleGradients {
    pub fn new(n_tasks: usize, n_batch: usize, grads: Vec<ParamVector>, losses: Matrix) -> Result<Self> {
        if grads.len() != n_tasks * n_batch || losses.rows() != n_tasks || losses.cols() != n_batch {
            return Err(Error::Shape("gradient grid does not match its dimensions".into()));
        }
        Ok(SampleGradients {
            n_tasks,
            n_batch,
            grads,
            losses,
        })
    }

    pub fn n_tasks(&self) -> usize {
        self.n_tasks
    }

    pub fn n_batch(&self) -> usize {
        self.n_batch
    }

    pub fn get(&self, task: usize, sample: usize) -> &ParamVector {
        &self.grads[task * self.n_batch + sample]
    }

    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), &ParamVector)> {
        self.grads
            .iter()
            .enumerate()
            .map(move |(k, g)| ((k / self.n_batch, k % self.n_batch), g))
    }

    /// Mean over samples of each task's gradients.
    pub fn task_means(&self) -> Vec<ParamVector> {
        (0..self.n_tasks)
            .map(|i| {
                let mut acc = ParamVector::zeros(self.grads[0].layout().clone());
                for j in 0..self.n_batch {
                    acc.add_scaled(1.0 / self.n_batch as f64, self.get(i, j))
                        .expect("same layout");
                }
                acc
            })
            .collect()
    }

    /// Mean per-sample loss of each task.
    pub fn task_losses(&self) -> Vec<f64> {
        (0..self.n_tasks)
            .map(|i| self.losses.row(i).iter().sum::<f64>() / self.n_batch as f64)
            .collect()
    }
}

impl MtlNetwork {
    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn n_tasks(&self) -> usize {
        self.heads.len()
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim
    }

    pub fn output_dims(&self) -> &[usize] {
        &self.arch.output_dims
    }

    pub fn shared_layers(&self) -> &[DenseLayer] {
        &self.shared
    }

    pub fn head_layers(&self, task: usize) -> &[DenseLayer] {
        &self.heads[task]
    }

    fn layers(&self) -> impl Iterator<Item = &DenseLayer> {
        self.shared.iter().chain(self.heads.iter().flatten())
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut DenseLayer> {
        self.shared.iter_mut().chain(self.heads.iter_mut().flatten())
    }

    pub fn flatten(&self) -> ParamVector {
        let mut data = Vec::with_capacity(self.layout.len());
        for layer in self.layers() {
            data.extend_from_slice(layer.weights.data());
            data.extend_from_slice(&layer.bias);
        }
        ParamVector {
            values: Vector::new(data),
            layout: self.layout.clone(),
        }
    }

    /// Overwrites every parameter from `params`.
    pub fn load(&mut self, params: &ParamVector) -> Result<()> {
        if params.len() != self.layout.len() || **params.layout() != *self.layout {
            return Err(Error::Shape("parameter vector does not match this network".into()));
        }
        let mut src = params.as_slice();
        for layer in self.layers_mut() {
            let nw = layer.weights.data().len();
            layer.weights.data_mut().copy_from_slice(&src[..nw]);
            src = &src[nw..];
            let nb = layer.bias.len();
            layer.bias.copy_from_slice(&src[..nb]);
            src = &src[nb..];
        }
        Ok(())
    }

    /// Copy of this network carrying `params`.
    pub fn with_params(&self, params: &ParamVector) -> Result<MtlNetwork> {
        let mut net = self.clone();
        net.load(params)?;
        Ok(net)
    }

    /// Builds a network of `arch` from a flat parameter vector.
    pub fn unflatten(arch: &Architecture, params: &ParamVector) -> Result<MtlNetwork> {
        let mut net = init_network(arch, &mut Rng::new(0))?;
        net.load(params)?;
        Ok(net)
    }

    /// Predictions for every task, plus the trace needed for backprop.
    pub fn forward(&self, x: &Matrix) -> Result<(Vec<Matrix>, ForwardTrace)> {
        if x.cols() != self.arch.input_dim {
            return Err(Error::Shape(format!(
                "input has {} columns, network expects {}",
                x.cols(),
                self.arch.input_dim
            )));
        }
        let mut shared = Vec::with_capacity(self.shared.len());
        for layer in &self.shared {
            let input = shared.last().map_or(x, |t: &LayerTrace| &t.act);
            shared.push(layer.forward(input));
        }
        let trunk = &shared.last().expect("validated").act;
        let mut heads = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let mut traces: Vec<LayerTrace> = Vec::with_capacity(head.len());
            for layer in head {
                let input = traces.last().map_or(trunk, |t| &t.act);
                traces.push(layer.forward(input));
            }
            heads.push(traces);
        }
        let preds = heads
            .iter()
            .map(|h| h.last().expect("head has an output layer").act.clone())
            .collect();
        Ok((
            preds,
            ForwardTrace {
                input: x.clone(),
                shared,
                heads,
            },
        ))
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<Matrix>> {
        Ok(self.forward(x)?.0)
    }

    /// Backward pass for a single `(task, sample)` pair, accumulating
    /// `d(seed . output)/d(theta)` into `out`.
    fn backward_sample(&self, trace: &ForwardTrace, task: usize, sample: usize, seed: &[f64], out: &mut [f64]) {
        let head_base = self.layout.head_range(task).start;
        let mut delta = seed.to_vec();
        let head = &self.heads[task];
        let mut off = self.layout.head_range(task).end;
        for l in (0..head.len()).rev() {
            let layer = &head[l];
            let input = if l == 0 {
                trace.trunk_output().row(sample)
            } else {
                trace.heads[task][l - 1].act.row(sample)
            };
            off -= layer.weights.data().len() + layer.bias.len();
            delta = layer_backward(layer, &trace.heads[task][l], sample, input, &delta, off, out);
        }
        debug_assert_eq!(off, head_base);
        let mut off = self.layout.shared_range().end;
        for l in (0..self.shared.len()).rev() {
            let layer = &self.shared[l];
            let input = if l == 0 {
                trace.input.row(sample)
            } else {
                trace.shared[l - 1].act.row(sample)
            };
            off -= layer.weights.data().len() + layer.bias.len();
            delta = layer_backward(layer, &trace.shared[l], sample, input, &delta, off, out);
        }
    }

    /// Gradient of `sum_task sum_row seed[task][row] . output[task][row]`
    /// computed with batch-level matrix products. Tasks without a seed
    /// contribute nothing.
    pub fn batch_backward(&self, trace: &ForwardTrace, seeds: &[Option<Matrix>]) -> Result<ParamVector> {
        if seeds.len() != self.n_tasks() {
            return Err(Error::Shape("one seed slot per task required".into()));
        }
        let n = trace.batch_len();
        let mut grad = ParamVector::zeros(self.layout.clone());
        let trunk_width = self.arch.shared.last().copied().expect("validated");
        let mut trunk_delta = Matrix::zeros(n, trunk_width);
        for (task, seed) in seeds.iter().enumerate() {
            let Some(seed) = seed else { continue };
            if seed.rows() != n || seed.cols() != self.arch.output_dims[task] {
                return Err(Error::Shape(format!("seed for task {task} has wrong shape")));
            }
            let head = &self.heads[task];
            let mut delta = seed.clone();
            let mut off = self.layout.head_range(task).end;
            for l in (0..head.len()).rev() {
                let input = if l == 0 {
                    trace.trunk_output()
                } else {
                    &trace.heads[task][l - 1].act
                };
                off -= head[l].weights.data().len() + head[l].bias.len();
                delta = layer_backward_batch(&head[l], &trace.heads[task][l], input, &delta, off, grad.as_mut_slice());
            }
            trunk_delta = trunk_delta.add(&delta)?;
        }
        let mut delta = trunk_delta;
        let mut off = self.layout.shared_range().end;
        for l in (0..self.shared.len()).rev() {
            let input = if l == 0 { &trace.input } else { &trace.shared[l - 1].act };
            off -= self.shared[l].weights.data().len() + self.shared[l].bias.len();
            delta = layer_backward_batch(&self.shared[l], &trace.shared[l], input, &delta, off, grad.as_mut_slice());
        }
        Ok(grad)
    }
}

/// One layer of the per-sample backward pass. Returns the delta with respect
/// to the layer input.
fn layer_backward(
    layer: &DenseLayer,
    lt: &LayerTrace,
    sample: usize,
    input: &[f64],
    delta_out: &[f64],
    off: usize,
    grad: &mut [f64],
) -> Vec<f64> {
    let out_dim = layer.weights.rows();
    let in_dim = layer.weights.cols();
    let pre = lt.pre.row(sample);
    let act = lt.act.row(sample);
    let mut delta_in = vec![0.0; in_dim];
    let bias_off = off + out_dim * in_dim;
    for o in 0..out_dim {
        let d = delta_out[o] * layer.activation.derivative(pre[o], act[o]);
        if d == 0.0 {
            continue;
        }
        let w_row = layer.weights.row(o);
        let g_row = &mut grad[off + o * in_dim..off + (o + 1) * in_dim];
        for k in 0..in_dim {
            g_row[k] += d * input[k];
            delta_in[k] += w_row[k] * d;
        }
        grad[bias_off + o] += d;
    }
    delta_in
}

fn layer_backward_batch(
    layer: &DenseLayer,
    lt: &LayerTrace,
    input: &Matrix,
    delta_out: &Matrix,
    off: usize,
    grad: &mut [f64],
) -> Matrix {
    let n = input.rows();
    let out_dim = layer.weights.rows();
    let in_dim = layer.weights.cols();
    let mut delta_pre = Matrix::zeros(n, out_dim);
    for r in 0..n {
        for o in 0..out_dim {
            let d = delta_out.get(r, o) * layer.activation.derivative(lt.pre.get(r, o), lt.act.get(r, o));
            delta_pre.set(r, o, d);
        }
    }
    let bias_off = off + out_dim * in_dim;
    for o in 0..out_dim {
        for k in 0..in_dim {
            let mut s = 0.0;
            for r in 0..n {
                s += delta_pre.get(r, o) * input.get(r, k);
            }
            grad[off + o * in_dim + k] += s;
        }
        grad[bias_off + o] += (0..n).map(|r| delta_pre.get(r, o)).sum::<f64>();
    }
    let mut delta_in = Matrix::zeros(n, in_dim);
    for r in 0..n {
        for k in 0..in_dim {
            let mut s = 0.0;
            for o in 0..out_dim {
                s += delta_pre.get(r, o) * layer.weights.get(o, k);
            }
            delta_in.set(r, k, s);
        }
    }
    delta_in
}

/// Gradient of the unweighted loss of every `(task, sample)` pair.
///
/// The forward pass runs once for the batch; the backward passes read the
/// shared trace and run in parallel.
pub fn per_sample_task_gradients(net: &MtlNetwork, batch: &TaskBatch, losses: &[LossKind]) -> Result<SampleGradients> {
    let n_tasks = net.n_tasks();
    if losses.len() != n_tasks || batch.targets.len() != n_tasks {
        return Err(Error::Config(format!(
            "network has {n_tasks} tasks, got {} loss kinds and {} target sets",
            losses.len(),
            batch.targets.len()
        )));
    }
    let n_batch = batch.len();
    let (preds, trace) = net.forward(&batch.x)?;
    let mut seeds = Vec::with_capacity(n_tasks * n_batch);
    let mut loss_mat = Matrix::zeros(n_tasks, n_batch);
    for i in 0..n_tasks {
        for j in 0..n_batch {
            let y = batch.targets[i].row(j);
            let yhat = preds[i].row(j);
            loss_mat.set(i, j, loss_value(losses[i], y, yhat)?);
            seeds.push(loss_grad_wrt_prediction(losses[i], y, yhat)?);
        }
    }
    let grads = seeds
        .par_iter()
        .enumerate()
        .map(|(k, seed)| {
            let mut g = ParamVector::zeros(net.layout.clone());
            net.backward_sample(&trace, k / n_batch, k % n_batch, seed, g.as_mut_slice());
            g
        })
        .collect();
    SampleGradients::new(n_tasks, n_batch, grads, loss_mat)
}

/// `sum_ij W_ij * grads[i][j]`, accumulated in task-major order.
pub fn weighted_total_gradient(grads: &SampleGradients, weights: &SampleWeightMatrix) -> Result<ParamVector> {
    let w = weights.as_matrix();
    if w.rows() != grads.n_tasks() || w.cols() != grads.n_batch() {
        return Err(Error::Shape(format!(
            "weights {}x{} vs gradients {}x{}",
            w.rows(),
            w.cols(),
            grads.n_tasks(),
            grads.n_batch()
        )));
    }
    let mut total = ParamVector::zeros(grads.get(0, 0).layout().clone());
    for ((i, j), g) in grads.iter() {
        let wij = w.get(i, j);
        if wij != 0.0 {
            total.add_scaled(wij, g)?;
        }
    }
    Ok(total)
}

/// `theta - eta * g`.
pub fn sgd_step(theta: &ParamVector, g: &ParamVector, eta: f64) -> Result<ParamVector> {
    if !(eta >= 0.0) || !eta.is_finite() {
        return Err(Error::Config(format!("learning rate must be finite and >= 0, got {eta}")));
    }
    let mut out = theta.clone();
    out.add_scaled(-eta, g)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_arch() -> Architecture {
        Architecture {
            input_dim: 10,
            shared: vec![64, 64],
            head_hidden: vec![32],
            output_dims: vec![1, 1],
            shared_activation: Activation::Tanh,
            head_activation: Activation::Relu,
        }
    }

    #[test]
    fn parameter_count_formula() {
        let arch = small_arch();
        let expected = (10 * 64 + 64) + (64 * 64 + 64) + 2 * ((64 * 32 + 32) + (32 + 1));
        assert_eq!(expected, 9_090);
        assert_eq!(arch.param_count(), expected);
        let net = init_network(&arch, &mut Rng::new(1)).unwrap();
        assert_eq!(net.flatten().len(), expected);
    }

    #[test]
    fn init_is_deterministic_and_seed_dependent() {
        let arch = small_arch();
        let a = init_network(&arch, &mut Rng::new(3)).unwrap().flatten();
        let b = init_network(&arch, &mut Rng::new(3)).unwrap().flatten();
        let c = init_network(&arch, &mut Rng::new(0)).unwrap().flatten();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn init_respects_glorot_bound_and_zero_bias() {
        let net = init_network(&small_arch(), &mut Rng::new(8)).unwrap();
        for layer in net.layers() {
            let bound = (6.0 / (layer.weights.rows() + layer.weights.cols()) as f64).sqrt();
            assert!(layer.weights.data().iter().all(|w| w.abs() <= bound));
            assert!(layer.bias.iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn init_rejects_bad_arch() {
        let mut arch = small_arch();
        arch.shared.clear();
        assert!(init_network(&arch, &mut Rng::new(0)).is_err());
        let mut arch = small_arch();
        arch.output_dims = vec![1, 0];
        assert!(init_network(&arch, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn flatten_load_roundtrip() {
        let arch = small_arch();
        let net = init_network(&arch, &mut Rng::new(4)).unwrap();
        let back = MtlNetwork::unflatten(&arch, &net.flatten()).unwrap();
        assert_eq!(back, net);
    }

    #[test]
    fn zero_network_predicts_zero() {
        let arch = small_arch();
        let net = init_network(&arch, &mut Rng::new(4)).unwrap();
        let zero = ParamVector::zeros(net.layout().clone());
        let net = net.with_params(&zero).unwrap();
        let x = crate::tensor::gaussian_matrix(&mut Rng::new(1), 5, 10, 1.0).unwrap();
        for p in net.predict(&x).unwrap() {
            assert!(p.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn forward_is_batch_independent() {
        let net = init_network(&small_arch(), &mut Rng::new(12)).unwrap();
        let x = crate::tensor::gaussian_matrix(&mut Rng::new(2), 6, 10, 1.0).unwrap();
        let full = net.predict(&x).unwrap();
        let single = net.predict(&x.select_rows(&[3])).unwrap();
        for t in 0..2 {
            assert_eq!(full[t].row(3), single[t].row(0));
        }
        let dup = net.predict(&x.select_rows(&[1; 8])).unwrap();
        for r in 1..8 {
            assert_eq!(dup[0].row(r), dup[0].row(0));
        }
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let net = init_network(&small_arch(), &mut Rng::new(12)).unwrap();
        assert!(net.forward(&Matrix::zeros(2, 9)).is_err());
    }

    #[test]
    fn sgd_step_cases() {
        let layout = Arc::new(Layout::flat(2));
        let theta = ParamVector::from_values(layout.clone(), Vector::new(vec![1.0, 1.0])).unwrap();
        let g = ParamVector::from_values(layout.clone(), Vector::new(vec![1.0, 0.0])).unwrap();
        assert_eq!(sgd_step(&theta, &g, 0.1).unwrap().as_slice(), &[0.9, 1.0]);
        let zero = ParamVector::zeros(layout);
        assert_eq!(sgd_step(&theta, &zero, 0.1).unwrap(), theta);
        assert!(sgd_step(&theta, &g, -1.0).is_err());
    }

    fn fd_arch(output_dims: Vec<usize>) -> Architecture {
        Architecture {
            input_dim: 10,
            shared: vec![8, 8],
            head_hidden: vec![6],
            output_dims,
            shared_activation: Activation::Tanh,
            head_activation: Activation::Relu,
        }
    }

    fn batch_for(net: &MtlNetwork, n: usize, rng: &mut Rng, losses: &[LossKind]) -> TaskBatch {
        let x = crate::tensor::gaussian_matrix(rng, n, net.input_dim(), 1.0).unwrap();
        let targets = net
            .output_dims()
            .iter()
            .zip(losses)
            .map(|(&d, kind)| {
                let rows: Vec<Vec<f64>> = (0..n)
                    .map(|_| match kind {
                        LossKind::Mse => (0..d).map(|_| rng.normal()).collect(),
                        LossKind::BceWithLogits => (0..d).map(|_| rng.index(2) as f64).collect(),
                        LossKind::CeWithLogits => vec![rng.index(d) as f64],
                    })
                    .collect();
                Matrix::from_rows(&rows).unwrap()
            })
            .collect();
        TaskBatch {
            x,
            targets,
            corrupted: vec![vec![false; n]; net.n_tasks()],
            indices: (0..n).collect(),
        }
    }

    fn sample_loss(net: &MtlNetwork, batch: &TaskBatch, kind: LossKind, i: usize, j: usize) -> f64 {
        let preds = net.predict(&batch.x.select_rows(&[j])).unwrap();
        loss_value(kind, batch.targets[i].row(j), preds[i].row(0)).unwrap()
    }

    fn max_rel_fd_error(arch: &Architecture, losses: &[LossKind], seed: u64) -> f64 {
        let mut rng = Rng::new(seed);
        let net = init_network(arch, &mut rng).unwrap();
        let batch = batch_for(&net, 3, &mut rng, losses);
        let grads = per_sample_task_gradients(&net, &batch, losses).unwrap();
        let theta = net.flatten();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for ((i, j), g) in grads.iter() {
            for p in 0..theta.len() {
                let mut plus = theta.clone();
                plus.as_mut_slice()[p] += h;
                let mut minus = theta.clone();
                minus.as_mut_slice()[p] -= h;
                let fp = sample_loss(&net.with_params(&plus).unwrap(), &batch, losses[i], i, j);
                let fm = sample_loss(&net.with_params(&minus).unwrap(), &batch, losses[i], i, j);
                let fd = (fp - fm) / (2.0 * h);
                let a = g.as_slice()[p];
                let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-4);
                worst = worst.max(rel);
            }
        }
        worst
    }

    #[test]
    fn per_sample_gradients_match_finite_differences() {
        let arch = fd_arch(vec![1, 1]);
        let losses = [LossKind::Mse, LossKind::Mse];
        for seed in 0..10 {
            let e = max_rel_fd_error(&arch, &losses, 100 + seed);
            assert!(e < 1e-6, "seed {seed}: max relative error {e}");
        }
    }

    #[test]
    fn per_sample_gradients_match_finite_differences_for_logit_losses() {
        let arch = fd_arch(vec![3, 4]);
        let e = max_rel_fd_error(&arch, &[LossKind::BceWithLogits, LossKind::CeWithLogits], 7);
        assert!(e < 1e-6, "max relative error {e}");
    }

    #[test]
    fn sample_gradient_leaves_other_heads_untouched() {
        let arch = fd_arch(vec![1, 1, 2]);
        let losses = [LossKind::Mse; 3];
        let mut rng = Rng::new(21);
        let net = init_network(&arch, &mut rng).unwrap();
        let batch = batch_for(&net, 4, &mut rng, &losses);
        let grads = per_sample_task_gradients(&net, &batch, &losses).unwrap();
        for ((i, _), g) in grads.iter() {
            for other in (0..3).filter(|&t| t != i) {
                assert!(g.head_segment(other).iter().all(|&v| v == 0.0));
            }
            assert!(g.head_segment(i).iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn uniform_weights_match_batch_backward() {
        let arch = fd_arch(vec![1, 2]);
        let losses = [LossKind::Mse, LossKind::Mse];
        let mut rng = Rng::new(5);
        let net = init_network(&arch, &mut rng).unwrap();
        let batch = batch_for(&net, 6, &mut rng, &losses);
        let grads = per_sample_task_gradients(&net, &batch, &losses).unwrap();
        let uniform = crate::weighting::static_weights(2, 6).unwrap();
        let total = weighted_total_gradient(&grads, &uniform).unwrap();

        // Oracle: batch-matrix backprop of (1/12) * sum of all sample losses.
        let (preds, trace) = net.forward(&batch.x).unwrap();
        let seeds: Vec<Option<Matrix>> = (0..2)
            .map(|i| {
                let rows: Vec<Vec<f64>> = (0..6)
                    .map(|j| {
                        loss_grad_wrt_prediction(losses[i], batch.targets[i].row(j), preds[i].row(j))
                            .unwrap()
                            .into_iter()
                            .map(|v| v / 12.0)
                            .collect()
                    })
                    .collect();
                Some(Matrix::from_rows(&rows).unwrap())
            })
            .collect();
        let oracle = net.batch_backward(&trace, &seeds).unwrap();
        for (a, b) in total.as_slice().iter().zip(oracle.as_slice()) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn one_hot_weights_select_one_gradient() {
        let arch = fd_arch(vec![1, 1]);
        let losses = [LossKind::Mse; 2];
        let mut rng = Rng::new(6);
        let net = init_network(&arch, &mut rng).unwrap();
        let batch = batch_for(&net, 3, &mut rng, &losses);
        let grads = per_sample_task_gradients(&net, &batch, &losses).unwrap();
        let mut m = Matrix::zeros(2, 3);
        m.set(1, 2, 1.0);
        let w = SampleWeightMatrix::new(m).unwrap();
        assert_eq!(weighted_total_gradient(&grads, &w).unwrap(), *grads.get(1, 2));
        let zero = SampleWeightMatrix::zeros(2, 3);
        assert!(weighted_total_gradient(&grads, &zero).unwrap().as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_linear_unit_hand_gradient() {
        // y_hat = w * x with x = 1, y = 2, w = 1: d/dw (y - y_hat)^2 = -2.
        let arch = Architecture {
            input_dim: 1,
            shared: vec![1],
            head_hidden: vec![],
            output_dims: vec![1],
            shared_activation: Activation::Identity,
            head_activation: Activation::Identity,
        };
        let net = init_network(&arch, &mut Rng::new(0)).unwrap();
        // Shared weight, shared bias, head weight, head bias.
        let params = ParamVector::from_values(net.layout().clone(), Vector::new(vec![1.0, 0.0, 1.0, 0.0])).unwrap();
        let net = net.with_params(&params).unwrap();
        let batch = TaskBatch {
            x: Matrix::from_rows(&[vec![1.0]]).unwrap(),
            targets: vec![Matrix::from_rows(&[vec![2.0]]).unwrap()],
            corrupted: vec![vec![false]],
            indices: vec![0],
        };
        let g = per_sample_task_gradients(&net, &batch, &[LossKind::Mse]).unwrap();
        assert_eq!(g.get(0, 0).as_slice(), &[-2.0, -2.0, -2.0, -2.0]);

        let exact = TaskBatch {
            targets: vec![Matrix::from_rows(&[vec![1.0]]).unwrap()],
            ..batch
        };
        let g = per_sample_task_gradients(&net, &exact, &[LossKind::Mse]).unwrap();
        assert!(g.get(0, 0).as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn weighted_gradient_is_linear_in_weights() {
        let arch = fd_arch(vec![1, 1]);
        let losses = [LossKind::Mse; 2];
        let mut rng = Rng::new(9);
        let net = init_network(&arch, &mut rng).unwrap();
        let batch = batch_for(&net, 4, &mut rng, &losses);
        let grads = per_sample_task_gradients(&net, &batch, &losses).unwrap();
        let rand_w = |rng: &mut Rng| {
            let raw: Vec<f64> = (0..8).map(|_| rng.uniform(0.0, 1.0)).collect();
            let s: f64 = raw.iter().sum();
            Matrix::from_vec(2, 4, raw.into_iter().map(|v| v / s).collect()).unwrap()
        };
        let (a, b) = (rand_w(&mut rng), rand_w(&mut rng));
        let mix = Matrix::from_vec(2, 4, a.data().iter().zip(b.data()).map(|(x, y)| 0.3 * x + 0.7 * y).collect()).unwrap();
        let ga = weighted_total_gradient(&grads, &SampleWeightMatrix::new(a).unwrap()).unwrap();
        let gb = weighted_total_gradient(&grads, &SampleWeightMatrix::new(b).unwrap()).unwrap();
        let gm = weighted_total_gradient(&grads, &SampleWeightMatrix::new(mix).unwrap()).unwrap();
        for k in 0..gm.len() {
            let expect = 0.3 * ga.as_slice()[k] + 0.7 * gb.as_slice()[k];
            assert!((gm.as_slice()[k] - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
        }
    }

    #[test]
    fn two_steps_differ_from_one_summed_step_on_quadratic() {
        // f(theta) = ||theta||^2, gradient 2 theta. Two steps of eta give
        // (1 - 2 eta)^2 theta; one step with the summed first gradient gives
        // (1 - 4 eta) theta. They differ by 4 eta^2 theta.
        let layout = Arc::new(Layout::flat(3));
        let theta = ParamVector::from_values(layout.clone(), Vector::new(vec![1.0, -2.0, 0.5])).unwrap();
        let eta = 0.1;
        let grad = |t: &ParamVector| t.scale(2.0);
        let t1 = sgd_step(&theta, &grad(&theta), eta).unwrap();
        let t2 = sgd_step(&t1, &grad(&t1), eta).unwrap();
        let summed = sgd_step(&theta, &grad(&theta).scale(2.0), eta).unwrap();
        for k in 0..3 {
            let gap = t2.as_slice()[k] - summed.as_slice()[k];
            assert!((gap - 4.0 * eta * eta * theta.as_slice()[k]).abs() < 1e-12);
            assert!(gap != 0.0);
        }
    }
}
