//! Sample-level SLGrad weighting and the task-level baselines.
//!
//! Algorithms either emit a [`SampleWeightMatrix`] (SLGrad, Static, Random,
//! CosSim, OL-AUX, GradNorm) or a combined update direction (PCGrad, CAGrad).
//! Task-level weights are broadcast to samples as `w_i / (sum(w) * N_B)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ParamVector, SampleGradients};
use crate::tensor::{Matrix, Rng};

const SUM_TOL: f64 = 1e-9;

/// Non-negative `N_T x N_B` weights that sum to one, or are all zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleWeightMatrix(Matrix);

impl SampleWeightMatrix {
    pub fn new(w: Matrix) -> Result<Self> {
        if w.data().iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config("sample weights must be finite and non-negative".into()));
        }
        let sum = w.sum();
        if sum != 0.0 && (sum - 1.0).abs() > SUM_TOL {
            return Err(Error::Config(format!("sample weights sum to {sum}")));
        }
        Ok(SampleWeightMatrix(w))
    }

    pub fn zeros(n_tasks: usize, n_batch: usize) -> Self {
        SampleWeightMatrix(Matrix::zeros(n_tasks, n_batch))
    }

    /// Every sample of task `i` gets `task_weights[i] / (sum * n_batch)`.
    pub fn broadcast(task_weights: &[f64], n_batch: usize) -> Result<Self> {
        let total: f64 = task_weights.iter().sum();
        let mut w = Matrix::zeros(task_weights.len(), n_batch);
        if total > 0.0 {
            for (i, &tw) in task_weights.iter().enumerate() {
                let v = tw / (total * n_batch as f64);
                w.row_mut(i).fill(v);
            }
        }
        SampleWeightMatrix::new(w)
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn n_tasks(&self) -> usize {
        self.0.rows()
    }

    pub fn n_batch(&self) -> usize {
        self.0.cols()
    }

    pub fn get(&self, task: usize, sample: usize) -> f64 {
        self.0.get(task, sample)
    }

    pub fn is_zero(&self) -> bool {
        self.0.data().iter().all(|&v| v == 0.0)
    }

    pub fn task_totals(&self) -> Vec<f64> {
        (0..self.n_tasks()).map(|i| self.0.row(i).iter().sum()).collect()
    }
}

/// Uniform `1 / (N_T * N_B)`.
pub fn static_weights(n_tasks: usize, n_batch: usize) -> Result<SampleWeightMatrix> {
    if n_tasks == 0 || n_batch == 0 {
        return Err(Error::Config("static weights need at least one task and one sample".into()));
    }
    SampleWeightMatrix::broadcast(&vec![1.0; n_tasks], n_batch)
}

/// Raw alignment `grads[i][j] . val_grad` for every pair.
pub fn slgrad_raw_scores(grads: &SampleGradients, val_grad: &ParamVector) -> Result<Matrix> {
    let mut scores = Matrix::zeros(grads.n_tasks(), grads.n_batch());
    for ((i, j), g) in grads.iter() {
        scores.set(i, j, g.dot(val_grad)?);
    }
    Ok(scores)
}

/// Cosine variant of [`slgrad_raw_scores`]; zero-norm gradients score zero.
pub fn slgrad_cosine_scores(grads: &SampleGradients, val_grad: &ParamVector) -> Result<Matrix> {
    let vn = val_grad.norm();
    let mut scores = Matrix::zeros(grads.n_tasks(), grads.n_batch());
    for ((i, j), g) in grads.iter() {
        let denom = g.norm() * vn;
        if denom > 0.0 {
            scores.set(i, j, g.dot(val_grad)? / denom);
        }
    }
    Ok(scores)
}

/// Clamp at zero, then divide by the sum of the positives. Returns all zeros
/// when no score is positive.
pub fn slgrad_normalize(scores: &Matrix) -> Result<SampleWeightMatrix> {
    if scores.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Config("non-finite alignment score".into()));
    }
    let positive: f64 = scores.data().iter().map(|&s| s.max(0.0)).sum();
    let mut w = Matrix::zeros(scores.rows(), scores.cols());
    if positive > 0.0 {
        for (dst, &s) in w.data_mut().iter_mut().zip(scores.data()) {
            *dst = s.max(0.0) / positive;
        }
    }
    SampleWeightMatrix::new(w)
}

/// Softmax of i.i.d. standard normals per task, broadcast over samples.
pub fn random_weights(rng: &mut Rng, n_tasks: usize, n_batch: usize) -> Result<SampleWeightMatrix> {
    let z: Vec<f64> = (0..n_tasks).map(|_| rng.normal()).collect();
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    SampleWeightMatrix::broadcast(&e, n_batch)
}

/// Main task always on; an auxiliary task is on only when its gradient has a
/// strictly positive inner product with the main-task gradient.
pub fn cossim_task_mask(
    task_grads: &[ParamVector],
    main_grad: &ParamVector,
    main_task: usize,
    n_batch: usize,
) -> Result<SampleWeightMatrix> {
    let mut w = Vec::with_capacity(task_grads.len());
    for (i, g) in task_grads.iter().enumerate() {
        let on = i == main_task || g.dot(main_grad)? > 0.0;
        w.push(if on { 1.0 } else { 0.0 });
    }
    SampleWeightMatrix::broadcast(&w, n_batch)
}

/// Online auxiliary weighting: alignment with the main gradient is
/// accumulated and applied every `horizon` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct OlAuxState {
    pub weights: Vec<f64>,
    pub accumulated: Vec<f64>,
    pub steps: usize,
}

impl OlAuxState {
    pub fn new(n_tasks: usize) -> Self {
        OlAuxState {
            weights: vec![1.0; n_tasks],
            accumulated: vec![0.0; n_tasks],
            steps: 0,
        }
    }
}

pub fn olaux_update(
    state: &mut OlAuxState,
    task_grads: &[ParamVector],
    main_grad: &ParamVector,
    main_task: usize,
    eta_w: f64,
    horizon: usize,
) -> Result<Vec<f64>> {
    if horizon == 0 {
        return Err(Error::Config("OL-AUX horizon must be positive".into()));
    }
    if task_grads.len() != state.weights.len() {
        return Err(Error::Shape("OL-AUX task count changed".into()));
    }
    for (i, g) in task_grads.iter().enumerate() {
        if i != main_task {
            state.accumulated[i] += g.dot(main_grad)?;
        }
    }
    state.steps += 1;
    if state.steps % horizon == 0 {
        for i in 0..state.weights.len() {
            if i != main_task {
                state.weights[i] = (state.weights[i] + eta_w * state.accumulated[i] / horizon as f64).max(0.0);
            }
            state.accumulated[i] = 0.0;
        }
    }
    state.weights[main_task] = 1.0;
    Ok(state.weights.clone())
}

/// `g_i` minus its component along `g_j` when the two conflict.
pub fn project_conflicting(g_i: &ParamVector, g_j: &ParamVector) -> Result<ParamVector> {
    let d = g_i.dot(g_j)?;
    let nj = g_j.dot(g_j)?;
    let mut out = g_i.clone();
    if d < 0.0 && nj > 0.0 {
        out.add_scaled(-d / nj, g_j)?;
    }
    Ok(out)
}

/// PCGrad: each task gradient is projected against the others, visited in a
/// random order, and the projected gradients are averaged.
pub fn pcgrad_combine(task_grads: &[ParamVector], rng: &mut Rng) -> Result<ParamVector> {
    if task_grads.len() < 2 {
        return Err(Error::Config("PCGrad needs at least two tasks".into()));
    }
    let n = task_grads.len();
    let mut total = ParamVector::zeros(task_grads[0].layout().clone());
    for i in 0..n {
        let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        rng.shuffle(&mut order);
        let mut g = task_grads[i].clone();
        for j in order {
            g = project_conflicting(&g, &task_grads[j])?;
        }
        total.add_scaled(1.0 / n as f64, &g)?;
    }
    Ok(total)
}

/// Dual objective `F(w) = w.b + c*|g0| * sqrt(w' G w)` where `G` is the Gram
/// matrix of the task gradients and `b = G 1 / N_T`.
pub fn cagrad_dual(gram: &Matrix, c: f64, w: &[f64]) -> f64 {
    let n = gram.rows();
    let b: Vec<f64> = (0..n).map(|i| gram.row(i).iter().sum::<f64>() / n as f64).collect();
    let g0_norm = (b.iter().sum::<f64>() / n as f64).max(0.0).sqrt();
    let gw = gram.matvec(w).expect("square gram");
    let quad: f64 = w.iter().zip(&gw).map(|(a, b)| a * b).sum();
    w.iter().zip(&b).map(|(a, b)| a * b).sum::<f64>() + c * g0_norm * quad.max(0.0).sqrt()
}

fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
    let mut cum = 0.0;
    let mut tau = 0.0;
    for (k, &uk) in u.iter().enumerate() {
        cum += uk;
        let t = (cum - 1.0) / (k + 1) as f64;
        if uk - t > 0.0 {
            tau = t;
        }
    }
    v.iter().map(|x| (x - tau).max(0.0)).collect()
}

fn gram_matrix(task_grads: &[ParamVector]) -> Result<Matrix> {
    let n = task_grads.len();
    let mut g = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let d = task_grads[i].dot(&task_grads[j])?;
            g.set(i, j, d);
            g.set(j, i, d);
        }
    }
    Ok(g)
}

/// Minimizes [`cagrad_dual`] over the probability simplex with projected
/// gradient steps and backtracking.
pub fn cagrad_solve_weights(gram: &Matrix, c: f64, iters: usize) -> Vec<f64> {
    let n = gram.rows();
    let mut w = vec![1.0 / n as f64; n];
    let scale = (0..n).map(|i| gram.get(i, i)).fold(0.0, f64::max);
    if scale <= 0.0 {
        return w;
    }
    let b: Vec<f64> = (0..n).map(|i| gram.row(i).iter().sum::<f64>() / n as f64).collect();
    let g0_norm = (b.iter().sum::<f64>() / n as f64).max(0.0).sqrt();
    let mut f = cagrad_dual(gram, c, &w);
    let mut step = 1.0 / scale;
    for _ in 0..iters {
        let gw = gram.matvec(&w).expect("square gram");
        let norm = w.iter().zip(&gw).map(|(a, b)| a * b).sum::<f64>().max(0.0).sqrt();
        let grad: Vec<f64> = (0..n)
            .map(|i| b[i] + if norm > 1e-300 { c * g0_norm * gw[i] / norm } else { 0.0 })
            .collect();
        let mut accepted = false;
        for _ in 0..60 {
            let cand = project_simplex(&w.iter().zip(&grad).map(|(a, g)| a - step * g).collect::<Vec<_>>());
            let fc = cagrad_dual(gram, c, &cand);
            let moved: f64 = cand.iter().zip(&w).map(|(a, b)| (a - b).powi(2)).sum();
            let decrease: f64 = grad.iter().zip(cand.iter().zip(&w)).map(|(g, (a, b))| g * (a - b)).sum();
            if fc <= f + decrease + moved / (2.0 * step) {
                if fc <= f {
                    w = cand;
                    f = fc;
                }
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        step *= 2.0;
    }
    w
}

/// CAGrad direction `g0 + (c*|g0| / |g_w|) g_w`.
pub fn cagrad_combine(task_grads: &[ParamVector], c: f64, iters: usize) -> Result<ParamVector> {
    if task_grads.is_empty() {
        return Err(Error::Config("CAGrad needs at least one task".into()));
    }
    if !(c >= 0.0) || iters == 0 {
        return Err(Error::Config(format!("CAGrad needs c >= 0 and iters >= 1, got c={c}, iters={iters}")));
    }
    let n = task_grads.len();
    let mut g0 = ParamVector::zeros(task_grads[0].layout().clone());
    for g in task_grads {
        g0.add_scaled(1.0 / n as f64, g)?;
    }
    let g0_norm = g0.norm();
    if g0_norm == 0.0 || c == 0.0 {
        return Ok(g0);
    }
    let gram = gram_matrix(task_grads)?;
    let w = cagrad_solve_weights(&gram, c, iters);
    let mut gw = ParamVector::zeros(g0.layout().clone());
    for (g, &wi) in task_grads.iter().zip(&w) {
        gw.add_scaled(wi, g)?;
    }
    let gw_norm = gw.norm();
    let mut out = g0;
    if gw_norm > 0.0 {
        out.add_scaled(c * g0_norm / gw_norm, &gw)?;
    }
    Ok(out)
}

/// GradNorm weights (sum `N_T`) and the reference losses from step 0.
#[derive(Debug, Clone, PartialEq)]
pub struct GradNormState {
    pub weights: Vec<f64>,
    pub initial_losses: Option<Vec<f64>>,
}

impl GradNormState {
    pub fn new(n_tasks: usize) -> Self {
        GradNormState {
            weights: vec![1.0; n_tasks],
            initial_losses: None,
        }
    }
}

/// One GradNorm update. `grad_norms[i]` is the norm of task `i`'s unweighted
/// loss gradient over the shared parameters.
pub fn gradnorm_step(
    state: &mut GradNormState,
    grad_norms: &[f64],
    task_losses: &[f64],
    alpha: f64,
    eta_w: f64,
) -> Result<Vec<f64>> {
    let n = state.weights.len();
    if grad_norms.len() != n || task_losses.len() != n {
        return Err(Error::Shape("GradNorm inputs do not match the task count".into()));
    }
    let initial = state.initial_losses.get_or_insert_with(|| task_losses.to_vec());
    if initial.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::Config("GradNorm needs strictly positive initial losses".into()));
    }
    let ratios: Vec<f64> = task_losses.iter().zip(initial.iter()).map(|(l, l0)| l / l0).collect();
    let mean_ratio = ratios.iter().sum::<f64>() / n as f64;
    let g: Vec<f64> = state.weights.iter().zip(grad_norms).map(|(w, n)| w * n).collect();
    let g_mean = g.iter().sum::<f64>() / n as f64;
    for i in 0..n {
        let r = if mean_ratio > 0.0 { ratios[i] / mean_ratio } else { 1.0 };
        let target = g_mean * r.powf(alpha);
        let diff = g[i] - target;
        let sign = if diff > 0.0 {
            1.0
        } else if diff < 0.0 {
            -1.0
        } else {
            0.0
        };
        state.weights[i] = (state.weights[i] - eta_w * sign * grad_norms[i]).max(1e-8);
    }
    let total: f64 = state.weights.iter().sum();
    for w in &mut state.weights {
        *w *= n as f64 / total;
    }
    Ok(state.weights.clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Static,
    Random,
    CosSim,
    OlAux,
    PcGrad,
    CaGrad,
    GradNorm,
    SlGrad,
}

impl Algorithm {
    pub const ALL: [Algorithm; 8] = [
        Algorithm::Static,
        Algorithm::OlAux,
        Algorithm::PcGrad,
        Algorithm::CaGrad,
        Algorithm::CosSim,
        Algorithm::GradNorm,
        Algorithm::Random,
        Algorithm::SlGrad,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Static => "static",
            Algorithm::Random => "random",
            Algorithm::CosSim => "cossim",
            Algorithm::OlAux => "olaux",
            Algorithm::PcGrad => "pcgrad",
            Algorithm::CaGrad => "cagrad",
            Algorithm::GradNorm => "gradnorm",
            Algorithm::SlGrad => "slgrad",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace(['-', '_'], "");
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == key)
            .ok_or_else(|| Error::Config(format!("unknown algorithm {s:?}")))
    }

    /// Whether the algorithm needs per-sample gradients and the validation
    /// gradient.
    pub fn needs_sample_grads(self) -> bool {
        self == Algorithm::SlGrad
    }

    /// Whether the algorithm returns an update direction instead of weights.
    pub fn combines_directions(self) -> bool {
        matches!(self, Algorithm::PcGrad | Algorithm::CaGrad)
    }

    pub fn needs_task_grads(self) -> bool {
        matches!(
            self,
            Algorithm::CosSim | Algorithm::OlAux | Algorithm::PcGrad | Algorithm::CaGrad | Algorithm::GradNorm
        )
    }
}

/// Hyperparameters for every algorithm; only those of the selected one are
/// read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeighterConfig {
    pub algorithm: Algorithm,
    pub main_task: usize,
    /// Score samples by cosine similarity with the validation gradient
    /// instead of the raw dot product. Signs, and so the clamp pattern, agree.
    pub slgrad_cosine: bool,
    pub olaux_horizon: usize,
    pub olaux_lr: f64,
    pub gradnorm_alpha: f64,
    pub gradnorm_lr: f64,
    pub cagrad_c: f64,
    pub cagrad_iters: usize,
}

impl WeighterConfig {
    pub fn new(algorithm: Algorithm) -> Self {
        WeighterConfig {
            algorithm,
            main_task: 0,
            slgrad_cosine: true,
            olaux_horizon: 5,
            olaux_lr: 1e-3,
            gradnorm_alpha: 1.5,
            gradnorm_lr: 0.025,
            cagrad_c: 0.4,
            cagrad_iters: 20,
        }
    }
}

#[derive(Debug, Clone)]
pub enum WeighterState {
    Stateless,
    Random(Rng),
    PcGrad(Rng),
    OlAux(OlAuxState),
    GradNorm(GradNormState),
}

/// Inputs for one weighting call. Which fields are required depends on the
/// algorithm.
#[derive(Debug, Clone, Copy)]
pub struct WeightingContext<'a> {
    pub n_tasks: usize,
    pub n_batch: usize,
    pub sample_grads: Option<&'a SampleGradients>,
    pub task_grads: Option<&'a [ParamVector]>,
    pub val_grad: Option<&'a ParamVector>,
    pub task_losses: Option<&'a [f64]>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepDirective {
    Weights(SampleWeightMatrix),
    Direction(ParamVector),
}

/// Algorithm plus whatever state it keeps between steps.
#[derive(Debug, Clone)]
pub struct Weighter {
    config: WeighterConfig,
    state: WeighterState,
}

impl Weighter {
    pub fn new(config: WeighterConfig, n_tasks: usize, seed: u64) -> Self {
        let state = match config.algorithm {
            Algorithm::Random => WeighterState::Random(Rng::derive(seed, "weighting")),
            Algorithm::PcGrad => WeighterState::PcGrad(Rng::derive(seed, "weighting")),
            Algorithm::OlAux => WeighterState::OlAux(OlAuxState::new(n_tasks)),
            Algorithm::GradNorm => WeighterState::GradNorm(GradNormState::new(n_tasks)),
            _ => WeighterState::Stateless,
        };
        Weighter { config, state }
    }

    pub fn config(&self) -> &WeighterConfig {
        &self.config
    }

    pub fn state(&self) -> &WeighterState {
        &self.state
    }

    pub fn algorithm(&self) -> Algorithm {
        self.config.algorithm
    }

    pub fn compute_step_weights(&mut self, ctx: &WeightingContext<'_>) -> Result<StepDirective> {
        let cfg = &self.config;
        let main = cfg.main_task;
        let task_grads = || ctx.task_grads.ok_or(Error::MissingContext("task gradients"));
        let weights = match (cfg.algorithm, &mut self.state) {
            (Algorithm::Static, _) => static_weights(ctx.n_tasks, ctx.n_batch)?,
            (Algorithm::SlGrad, _) => {
                let grads = ctx.sample_grads.ok_or(Error::MissingContext("per-sample gradients"))?;
                let val = ctx.val_grad.ok_or(Error::MissingContext("validation gradient"))?;
                let scores = if cfg.slgrad_cosine {
                    slgrad_cosine_scores(grads, val)?
                } else {
                    slgrad_raw_scores(grads, val)?
                };
                slgrad_normalize(&scores)?
            }
            (Algorithm::Random, WeighterState::Random(rng)) => random_weights(rng, ctx.n_tasks, ctx.n_batch)?,
            (Algorithm::CosSim, _) => {
                let tg = task_grads()?;
                cossim_task_mask(tg, &tg[main], main, ctx.n_batch)?
            }
            (Algorithm::OlAux, WeighterState::OlAux(st)) => {
                let tg = task_grads()?;
                let w = olaux_update(st, tg, &tg[main], main, cfg.olaux_lr, cfg.olaux_horizon)?;
                SampleWeightMatrix::broadcast(&w, ctx.n_batch)?
            }
            (Algorithm::GradNorm, WeighterState::GradNorm(st)) => {
                let tg = task_grads()?;
                let losses = ctx.task_losses.ok_or(Error::MissingContext("task losses"))?;
                let norms: Vec<f64> = tg
                    .iter()
                    .map(|g| g.shared_segment().iter().map(|v| v * v).sum::<f64>().sqrt())
                    .collect();
                let w = gradnorm_step(st, &norms, losses, cfg.gradnorm_alpha, cfg.gradnorm_lr)?;
                SampleWeightMatrix::broadcast(&w, ctx.n_batch)?
            }
            (Algorithm::PcGrad, WeighterState::PcGrad(rng)) => {
                return Ok(StepDirective::Direction(pcgrad_combine(task_grads()?, rng)?));
            }
            (Algorithm::CaGrad, _) => {
                return Ok(StepDirective::Direction(cagrad_combine(
                    task_grads()?,
                    cfg.cagrad_c,
                    cfg.cagrad_iters,
                )?));
            }
            (alg, _) => {
                return Err(Error::Config(format!("weighter state does not match {}", alg.name())));
            }
        };
        Ok(StepDirective::Weights(weights))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Layout;
    use crate::tensor::Vector;
    use std::sync::Arc;

    fn layout(n: usize) -> Arc<Layout> {
        Arc::new(Layout::flat(n))
    }

    fn pv(l: &Arc<Layout>, v: &[f64]) -> ParamVector {
        ParamVector::from_values(l.clone(), Vector::new(v.to_vec())).unwrap()
    }

    #[test]
    fn normalize_table_example() {
        let scores = Matrix::from_rows(&[vec![0.2, -0.1], vec![0.3, 0.0]]).unwrap();
        let w = slgrad_normalize(&scores).unwrap();
        let expected = [[0.4, 0.0], [0.6, 0.0]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((w.get(i, j) - expected[i][j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn normalize_degenerate_and_uniform() {
        let neg = Matrix::from_rows(&[vec![-1.0, -0.5], vec![-2.0, 0.0]]).unwrap();
        assert!(slgrad_normalize(&neg).unwrap().is_zero());
        let eq = Matrix::from_rows(&[vec![0.7; 3], vec![0.7; 3]]).unwrap();
        let w = slgrad_normalize(&eq).unwrap();
        assert!(w.as_matrix().data().iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-15));
    }

    #[test]
    fn static_cases() {
        let w = static_weights(2, 4).unwrap();
        assert!(w.as_matrix().data().iter().all(|&v| v == 0.125));
        assert_eq!(static_weights(1, 1).unwrap().get(0, 0), 1.0);
        assert!(static_weights(0, 3).is_err());
    }

    #[test]
    fn random_weights_contract() {
        let w = random_weights(&mut Rng::new(3), 1, 8).unwrap();
        assert!(w.as_matrix().data().iter().all(|&v| (v - 0.125).abs() < 1e-15));
        let a = random_weights(&mut Rng::new(9), 3, 5).unwrap();
        let b = random_weights(&mut Rng::new(9), 3, 5).unwrap();
        assert_eq!(a, b);
        for i in 0..3 {
            assert!(a.as_matrix().row(i).iter().all(|&v| v == a.get(i, 0)));
        }
        assert!((a.as_matrix().sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cossim_boundaries() {
        let l = layout(2);
        let main = pv(&l, &[1.0, 2.0]);
        let same = cossim_task_mask(&[main.clone(), main.clone()], &main, 0, 2).unwrap();
        assert!((same.task_totals()[1] - 0.5).abs() < 1e-15);
        let anti = cossim_task_mask(&[main.clone(), main.scale(-1.0)], &main, 0, 2).unwrap();
        assert_eq!(anti.task_totals(), vec![1.0, 0.0]);
        let orth = cossim_task_mask(&[main.clone(), pv(&l, &[2.0, -1.0])], &main, 0, 2).unwrap();
        assert_eq!(orth.task_totals(), vec![1.0, 0.0]);
    }

    #[test]
    fn olaux_rules() {
        let l = layout(2);
        let main = pv(&l, &[1.0, 0.0]);
        let orth = pv(&l, &[0.0, 1.0]);
        let mut st = OlAuxState::new(2);
        for _ in 0..10 {
            assert_eq!(olaux_update(&mut st, &[main.clone(), orth.clone()], &main, 0, 0.1, 5).unwrap(), vec![1.0, 1.0]);
        }
        // constant dot c = 3 over K = 4 steps raises the weight by eta * c
        let aux = pv(&l, &[3.0, 5.0]);
        let mut st = OlAuxState::new(2);
        let mut w = vec![];
        for _ in 0..4 {
            w = olaux_update(&mut st, &[main.clone(), aux.clone()], &main, 0, 0.01, 4).unwrap();
        }
        assert!((w[1] - (1.0 + 0.01 * 3.0)).abs() < 1e-15);
    }

    #[test]
    fn olaux_hand_trace_horizon_one() {
        let l = layout(2);
        let main = pv(&l, &[1.0, 1.0]);
        let mut st = OlAuxState::new(2);
        // dots: 2, -1.5, -4  =>  1 + 0.5*2 = 2;  2 - 0.75 = 1.25;  max(1.25 - 2, 0) = 0
        let auxes = [pv(&l, &[1.0, 1.0]), pv(&l, &[-0.5, -1.0]), pv(&l, &[-3.0, -1.0])];
        let expect = [2.0, 1.25, 0.0];
        for (aux, e) in auxes.iter().zip(expect) {
            let w = olaux_update(&mut st, &[main.clone(), aux.clone()], &main, 0, 0.5, 1).unwrap();
            assert!((w[1] - e).abs() < 1e-15, "{w:?}");
            assert_eq!(w[0], 1.0);
        }
    }

    #[test]
    fn pcgrad_hand_projection() {
        let l = layout(2);
        let g1 = pv(&l, &[1.0, 0.0]);
        let g2 = pv(&l, &[-1.0, 1.0]);
        assert_eq!(project_conflicting(&g1, &g2).unwrap().as_slice(), &[0.5, 0.5]);
        let ok = pv(&l, &[1.0, 1.0]);
        assert_eq!(project_conflicting(&g1, &ok).unwrap(), g1);
        let anti = project_conflicting(&g1, &g1.scale(-1.0)).unwrap();
        assert!(anti.as_slice().iter().all(|&v| v == 0.0));
        // combined: g2 against g1 gives (0, 1); mean of (0.5,0.5) and (0,1)
        let d = pcgrad_combine(&[g1, g2], &mut Rng::new(0)).unwrap();
        assert_eq!(d.as_slice(), &[0.25, 0.75]);
    }

    #[test]
    fn pcgrad_needs_two_tasks() {
        let l = layout(2);
        assert!(pcgrad_combine(&[pv(&l, &[1.0, 0.0])], &mut Rng::new(0)).is_err());
    }

    #[test]
    fn cagrad_symmetric_and_degenerate_cases() {
        let l = layout(2);
        let g = pv(&l, &[0.3, -1.2]);
        let d = cagrad_combine(&[g.clone(), g.clone(), g.clone()], 0.4, 20).unwrap();
        for k in 0..2 {
            assert!((d.as_slice()[k] - 1.4 * g.as_slice()[k]).abs() < 1e-12);
        }
        let d0 = cagrad_combine(&[g.clone(), g.clone()], 0.0, 20).unwrap();
        assert_eq!(d0, g);
        let g2 = pv(&l, &[-1.0, 0.2]);
        let mean = cagrad_combine(&[g.clone(), g2.clone()], 0.0, 20).unwrap();
        assert_eq!(mean.as_slice(), &[(0.3 - 1.0) / 2.0, (-1.2 + 0.2) / 2.0]);
        let zero = ParamVector::zeros(l.clone());
        assert_eq!(cagrad_combine(&[zero.clone(), zero.clone()], 0.4, 20).unwrap(), zero);
    }

    #[test]
    fn simplex_projection() {
        let p = project_simplex(&[0.5, 0.5]);
        assert_eq!(p, vec![0.5, 0.5]);
        let p = project_simplex(&[2.0, 0.0]);
        assert_eq!(p, vec![1.0, 0.0]);
        let p = project_simplex(&[0.2, 0.1, -0.3]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn gradnorm_fixed_point_and_sign() {
        let mut st = GradNormState::new(2);
        let w = gradnorm_step(&mut st, &[2.0, 2.0], &[1.0, 1.0], 1.5, 0.1).unwrap();
        assert_eq!(w, vec![1.0, 1.0]);
        let mut st = GradNormState::new(2);
        let w = gradnorm_step(&mut st, &[3.0, 1.0], &[0.5, 0.5], 0.0, 0.1).unwrap();
        assert!(w[0] < 1.0 && w[1] > 1.0);
        assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn gradnorm_hand_trace() {
        // step 1: L0 = (1, 2); norms (1, 2); ratios equal, G = (1, 2), mean 1.5
        //   w = (1 + 0.1, 1 - 0.2) = (1.1, 0.8), sum 1.9 -> (1.157894.., 0.842105..)
        let mut st = GradNormState::new(2);
        let w1 = gradnorm_step(&mut st, &[1.0, 2.0], &[1.0, 2.0], 1.0, 0.1).unwrap();
        assert!((w1[0] - 2.2 / 1.9).abs() < 1e-14 && (w1[1] - 1.6 / 1.9).abs() < 1e-14);
        // step 2: losses (0.5, 2) -> ratios (0.5, 1), mean 0.75, r = (2/3, 4/3)
        //   G = (w1[0]*1, w1[1]*2) = (1.15789, 1.68421), mean 1.42105
        //   targets (0.94737, 1.89474): task 0 above (decrease by 0.1), task 1 below (increase by 0.2)
        let w2 = gradnorm_step(&mut st, &[1.0, 2.0], &[0.5, 2.0], 1.0, 0.1).unwrap();
        let raw = [w1[0] - 0.1, w1[1] + 0.2];
        let s = raw[0] + raw[1];
        assert!((w2[0] - 2.0 * raw[0] / s).abs() < 1e-14 && (w2[1] - 2.0 * raw[1] / s).abs() < 1e-14);
        // step 3: same losses, norms (4, 1): G = (4 w2[0], w2[1]); task 0 above target
        let w3 = gradnorm_step(&mut st, &[4.0, 1.0], &[0.5, 2.0], 1.0, 0.1).unwrap();
        let g = [4.0 * w2[0], w2[1]];
        let gm = (g[0] + g[1]) / 2.0;
        let t = [gm * (2.0 / 3.0), gm * (4.0 / 3.0)];
        assert!(g[0] > t[0] && g[1] < t[1]);
        let raw = [w2[0] - 0.4, w2[1] + 0.1];
        let s = raw[0] + raw[1];
        assert!((w3[0] - 2.0 * raw[0] / s).abs() < 1e-14 && (w3[1] - 2.0 * raw[1] / s).abs() < 1e-14);
    }

    #[test]
    fn gradnorm_rejects_zero_initial_loss() {
        let mut st = GradNormState::new(2);
        assert!(gradnorm_step(&mut st, &[1.0, 1.0], &[0.0, 1.0], 1.5, 0.1).is_err());
    }

    #[test]
    fn algorithm_names_roundtrip() {
        for a in Algorithm::ALL {
            assert_eq!(Algorithm::parse(a.name()).unwrap(), a);
        }
        assert_eq!(Algorithm::parse("OL-AUX").unwrap(), Algorithm::OlAux);
        assert!(Algorithm::parse("adam").is_err());
    }

    #[test]
    fn weight_matrix_invariants_enforced() {
        assert!(SampleWeightMatrix::new(Matrix::from_rows(&[vec![0.5, 0.6]]).unwrap()).is_err());
        assert!(SampleWeightMatrix::new(Matrix::from_rows(&[vec![1.5, -0.5]]).unwrap()).is_err());
        assert!(SampleWeightMatrix::new(Matrix::zeros(2, 2)).is_ok());
    }

    fn grid_min_dual(gram: &Matrix, c: f64) -> f64 {
        (0..=1000)
            .map(|k| {
                let a = k as f64 / 1000.0;
                cagrad_dual(gram, c, &[a, 1.0 - a])
            })
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn cagrad_solver_matches_grid_search() {
        let mut rng = Rng::new(31);
        let l = layout(6);
        for _ in 0..25 {
            let g: Vec<ParamVector> = (0..2)
                .map(|_| pv(&l, &(0..6).map(|_| rng.normal()).collect::<Vec<_>>()))
                .collect();
            let gram = gram_matrix(&g).unwrap();
            for c in [0.1, 0.4, 0.9] {
                let w = cagrad_solve_weights(&gram, c, WeighterConfig::new(Algorithm::CaGrad).cagrad_iters);
                let solved = cagrad_dual(&gram, c, &w);
                let oracle = grid_min_dual(&gram, c);
                assert!(solved <= oracle + 1e-4, "c={c}: solver {solved}, grid {oracle}");
                assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12 && w.iter().all(|&v| v >= 0.0));
            }
        }
    }

    fn sample_grads(n_tasks: usize, n_batch: usize, dim: usize, rng: &mut Rng) -> SampleGradients {
        let l = layout(dim);
        let grads = (0..n_tasks * n_batch)
            .map(|_| pv(&l, &(0..dim).map(|_| rng.normal()).collect::<Vec<_>>()))
            .collect();
        SampleGradients::new(n_tasks, n_batch, grads, Matrix::zeros(n_tasks, n_batch)).unwrap()
    }

    proptest::proptest! {
        #[test]
        fn slgrad_sign_law_and_scale_invariance(seed in 0u64..10_000, c in 1e-3f64..1e3) {
            let mut rng = Rng::new(seed);
            let grads = sample_grads(2, 5, 4, &mut rng);
            let val = pv(&layout(4), &(0..4).map(|_| rng.normal()).collect::<Vec<_>>());
            let raw = slgrad_raw_scores(&grads, &val).unwrap();
            let w = slgrad_normalize(&raw).unwrap();
            for i in 0..2 {
                for j in 0..5 {
                    proptest::prop_assert_eq!(w.get(i, j) > 0.0, raw.get(i, j) > 0.0);
                }
            }
            let w_scaled = slgrad_normalize(&slgrad_raw_scores(&grads, &val.scale(c)).unwrap()).unwrap();
            for (a, b) in w.as_matrix().data().iter().zip(w_scaled.as_matrix().data()) {
                proptest::prop_assert!((a - b).abs() <= 1e-12);
            }
            let total: f64 = w.as_matrix().data().iter().sum();
            proptest::prop_assert!(w.is_zero() || (total - 1.0).abs() < 1e-9);
        }

        #[test]
        fn pcgrad_removes_pairwise_conflict(seed in 0u64..10_000) {
            let mut rng = Rng::new(seed);
            let l = layout(5);
            let a = pv(&l, &(0..5).map(|_| rng.normal()).collect::<Vec<_>>());
            let b = pv(&l, &(0..5).map(|_| rng.normal()).collect::<Vec<_>>());
            let p = project_conflicting(&a, &b).unwrap();
            proptest::prop_assert!(p.dot(&b).unwrap() >= -1e-10);
            if a.dot(&b).unwrap() >= 0.0 {
                proptest::prop_assert_eq!(p, a);
            }
        }
    }

    #[test]
    fn slgrad_is_stateless_across_calls() {
        let mut rng = Rng::new(2);
        let grads = sample_grads(2, 3, 4, &mut rng);
        let val = pv(&layout(4), &[1.0, -1.0, 0.5, 0.0]);
        let ctx = WeightingContext {
            n_tasks: 2,
            n_batch: 3,
            sample_grads: Some(&grads),
            task_grads: None,
            val_grad: Some(&val),
            task_losses: None,
        };
        let mut w = Weighter::new(WeighterConfig::new(Algorithm::SlGrad), 2, 0);
        let first = w.compute_step_weights(&ctx).unwrap();
        let other = sample_grads(2, 3, 4, &mut rng);
        let _ = w.compute_step_weights(&WeightingContext { sample_grads: Some(&other), ..ctx }).unwrap();
        let again = w.compute_step_weights(&ctx).unwrap();
        match (first, again) {
            (StepDirective::Weights(a), StepDirective::Weights(b)) => assert_eq!(a, b),
            _ => panic!("SLGrad must emit weights"),
        }
    }

    #[test]
    fn dispatch_cases() {
        let mut rng = Rng::new(4);
        let grads = sample_grads(2, 3, 4, &mut rng);
        let zero = ParamVector::zeros(layout(4));
        let base = WeightingContext {
            n_tasks: 2,
            n_batch: 3,
            sample_grads: Some(&grads),
            task_grads: None,
            val_grad: Some(&zero),
            task_losses: None,
        };
        let mut stat = Weighter::new(WeighterConfig::new(Algorithm::Static), 2, 0);
        match stat.compute_step_weights(&base).unwrap() {
            StepDirective::Weights(w) => assert_eq!(w, static_weights(2, 3).unwrap()),
            _ => panic!(),
        }
        let mut sl = Weighter::new(WeighterConfig::new(Algorithm::SlGrad), 2, 0);
        match sl.compute_step_weights(&base).unwrap() {
            StepDirective::Weights(w) => assert!(w.is_zero()),
            _ => panic!(),
        }
        assert!(matches!(
            sl.compute_step_weights(&WeightingContext { val_grad: None, ..base }),
            Err(Error::MissingContext(_))
        ));

        let l = layout(2);
        let tg = vec![pv(&l, &[1.0, 0.0]), pv(&l, &[-1.0, 1.0])];
        let ctx = WeightingContext {
            sample_grads: None,
            task_grads: Some(&tg),
            ..base
        };
        let mut pc = Weighter::new(WeighterConfig::new(Algorithm::PcGrad), 2, 9);
        let mut rng = Rng::derive(9, "weighting");
        let expected = pcgrad_combine(&tg, &mut rng).unwrap();
        match pc.compute_step_weights(&ctx).unwrap() {
            StepDirective::Direction(d) => assert_eq!(d, expected),
            _ => panic!(),
        }
    }
}
