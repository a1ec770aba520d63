//! Synthetic multi-task datasets, label corruption, and mini-batch sampling.
//!
//! Every split carries a per-task, per-sample corruption flag. Validation and
//! test splits are always clean.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::fmt9;
use crate::objectives::LossKind;
use crate::tensor::{gaussian_matrix, Matrix, Rng};

/// Inputs, per-task targets and corruption flags for a set of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub x: Matrix,
    pub targets: Vec<Matrix>,
    pub corrupted: Vec<Vec<bool>>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_tasks(&self) -> usize {
        self.targets.len()
    }

    pub fn select(&self, idx: &[usize]) -> TaskBatch {
        TaskBatch {
            x: self.x.select_rows(idx),
            targets: self.targets.iter().map(|t| t.select_rows(idx)).collect(),
            corrupted: self
                .corrupted
                .iter()
                .map(|f| idx.iter().map(|&i| f[i]).collect())
                .collect(),
            indices: idx.to_vec(),
        }
    }

    /// The whole split as one batch, in order.
    pub fn as_batch(&self) -> TaskBatch {
        self.select(&(0..self.len()).collect::<Vec<_>>())
    }

    /// Writes the split as comma-separated text: one column per input
    /// dimension, per target entry, and per task flag.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let mut header: Vec<String> = (0..self.x.cols()).map(|k| format!("x{k}")).collect();
        for (t, y) in self.targets.iter().enumerate() {
            if y.cols() == 1 {
                header.push(format!("y{t}"));
            } else {
                header.extend((0..y.cols()).map(|k| format!("y{t}_{k}")));
            }
        }
        header.extend((0..self.n_tasks()).map(|t| format!("corrupted{t}")));
        writeln!(w, "{}", header.join(","))?;
        for r in 0..self.len() {
            let mut row: Vec<String> = self.x.row(r).iter().map(|&v| fmt9(v)).collect();
            for y in &self.targets {
                row.extend(y.row(r).iter().map(|&v| fmt9(v)));
            }
            row.extend(self.corrupted.iter().map(|f| u8::from(f[r]).to_string()));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// A mini-batch drawn from a split.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskBatch {
    pub x: Matrix,
    pub targets: Vec<Matrix>,
    pub corrupted: Vec<Vec<bool>>,
    /// Row indices into the parent split.
    pub indices: Vec<usize>,
}

impl TaskBatch {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Train, validation and test splits plus the task definitions.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Split,
    pub val: Split,
    pub test: Split,
    pub losses: Vec<LossKind>,
    pub output_dims: Vec<usize>,
    pub main_task: usize,
}

impl Dataset {
    pub fn input_dim(&self) -> usize {
        self.train.x.cols()
    }

    pub fn n_tasks(&self) -> usize {
        self.losses.len()
    }
}

/// Uniform sample with replacement.
pub fn next_batch(split: &Split, batch_size: usize, rng: &mut Rng) -> Result<TaskBatch> {
    if split.is_empty() {
        return Err(Error::Config("cannot sample from an empty split".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let idx: Vec<usize> = (0..batch_size).map(|_| rng.index(split.len())).collect();
    Ok(split.select(&idx))
}

/// `floor(fraction * n)`, tolerant of representation error in `fraction`.
pub fn exact_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64) + 1e-9).floor() as usize
}

fn check_fraction(fraction: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("fraction must lie in [0, 1], got {fraction}")));
    }
    Ok(())
}

/// How the second argument of `N(0, s)` in the toy recipe is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleConvention {
    /// `s` is the standard deviation.
    Std,
    /// `s` is the variance.
    Variance,
}

impl ScaleConvention {
    pub fn std(self, s: f64) -> f64 {
        match self {
            ScaleConvention::Std => s,
            ScaleConvention::Variance => s.sqrt(),
        }
    }
}

/// Toy regression recipe: `y_i = sigma_i * tanh((B + eps_i) x)` with shared
/// `B` and per-task `eps_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub sigma: Vec<f64>,
    pub basis_scale: f64,
    pub task_scale: f64,
    pub noise_scale: f64,
    pub convention: ScaleConvention,
    pub noise_fraction: Vec<f64>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            input_dim: 10,
            output_dim: 1,
            sigma: vec![1.0, 1.0],
            basis_scale: 1.0,
            task_scale: 3.5f64.sqrt(),
            noise_scale: 2f64.sqrt(),
            convention: ScaleConvention::Std,
            noise_fraction: vec![0.0, 0.0],
            n_train: 1000,
            n_val: 200,
            n_test: 200,
            seed: 0,
        }
    }
}

impl ToySpec {
    /// Main task plus one auxiliary task, both corrupted at `noise`.
    pub fn with_noise(noise: f64, seed: u64) -> Self {
        ToySpec {
            noise_fraction: vec![noise, noise],
            seed,
            ..ToySpec::default()
        }
    }

    pub fn n_tasks(&self) -> usize {
        self.sigma.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::Config("toy dimensions must be positive".into()));
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(Error::Config("toy split sizes must be positive".into()));
        }
        if self.sigma.is_empty() || self.noise_fraction.len() != self.sigma.len() {
            return Err(Error::Config(format!(
                "{} task scales but {} noise fractions",
                self.sigma.len(),
                self.noise_fraction.len()
            )));
        }
        for &f in &self.noise_fraction {
            check_fraction(f)?;
        }
        for s in [self.basis_scale, self.task_scale, self.noise_scale] {
            if !(s >= 0.0) {
                return Err(Error::Config(format!("scale must be >= 0, got {s}")));
            }
        }
        Ok(())
    }
}

fn toy_split(spec: &ToySpec, maps: &[Matrix], n: usize, rng: &mut Rng) -> Result<Split> {
    let x = gaussian_matrix(rng, n, spec.input_dim, 1.0)?;
    let mut targets = Vec::with_capacity(maps.len());
    for (map, &sigma) in maps.iter().zip(&spec.sigma) {
        let mut y = Matrix::zeros(n, spec.output_dim);
        for r in 0..n {
            let z = map.matvec(x.row(r))?;
            for (dst, z) in y.row_mut(r).iter_mut().zip(z) {
                *dst = sigma * z.tanh();
            }
        }
        targets.push(y);
    }
    Ok(Split {
        x,
        targets,
        corrupted: vec![vec![false; n]; maps.len()],
    })
}

/// Generates the toy regression splits. A fraction of each task's training
/// targets gets additive Gaussian noise; the chosen rows are flagged.
pub fn generate_toy(spec: &ToySpec) -> Result<Dataset> {
    spec.validate()?;
    let n_tasks = spec.n_tasks();
    let mut basis_rng = Rng::derive(spec.seed, "toy-basis");
    let basis = gaussian_matrix(
        &mut basis_rng,
        spec.output_dim,
        spec.input_dim,
        spec.convention.std(spec.basis_scale),
    )?;
    let mut maps = Vec::with_capacity(n_tasks);
    for _ in 0..n_tasks {
        let eps = gaussian_matrix(
            &mut basis_rng,
            spec.output_dim,
            spec.input_dim,
            spec.convention.std(spec.task_scale),
        )?;
        maps.push(basis.add(&eps)?);
    }
    let mut train = toy_split(spec, &maps, spec.n_train, &mut Rng::derive(spec.seed, "toy-train"))?;
    let val = toy_split(spec, &maps, spec.n_val, &mut Rng::derive(spec.seed, "toy-val"))?;
    let test = toy_split(spec, &maps, spec.n_test, &mut Rng::derive(spec.seed, "toy-test"))?;

    let noise_std = spec.convention.std(spec.noise_scale);
    let mut noise_rng = Rng::derive(spec.seed, "toy-noise");
    for t in 0..n_tasks {
        let k = exact_count(spec.noise_fraction[t], spec.n_train);
        for r in noise_rng.choose_distinct(spec.n_train, k) {
            for v in train.targets[t].row_mut(r) {
                *v += noise_std * noise_rng.normal();
            }
            train.corrupted[t][r] = true;
        }
    }
    Ok(Dataset {
        train,
        val,
        test,
        losses: vec![LossKind::Mse; n_tasks],
        output_dims: vec![spec.output_dim; n_tasks],
        main_task: 0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlipMode {
    None,
    Uniform,
    Background,
}

impl FlipMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(FlipMode::None),
            "uniform" => Ok(FlipMode::Uniform),
            "background" => Ok(FlipMode::Background),
            other => Err(Error::Config(format!("unknown flip mode {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FlipMode::None => "none",
            FlipMode::Uniform => "uniform",
            FlipMode::Background => "background",
        }
    }
}

/// Gaussian-cluster classification recipe. Task 0 is one-vs-rest on
/// `main_class`; the remaining tasks are one-vs-rest on every other class in
/// increasing order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifySpec {
    pub n_classes: usize,
    pub input_dim: usize,
    pub center_std: f64,
    pub cluster_std: f64,
    pub main_class: usize,
    pub flip_mode: FlipMode,
    pub flip_fraction: f64,
    pub background_class: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for ClassifySpec {
    fn default() -> Self {
        ClassifySpec {
            n_classes: 4,
            input_dim: 10,
            center_std: 1.0,
            cluster_std: 1.0,
            main_class: 0,
            flip_mode: FlipMode::None,
            flip_fraction: 0.0,
            background_class: 1,
            n_train: 1000,
            n_val: 200,
            n_test: 200,
            seed: 0,
        }
    }
}

impl ClassifySpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Config("classification needs at least two classes".into()));
        }
        if self.main_class >= self.n_classes || self.background_class >= self.n_classes {
            return Err(Error::Config("class id out of range".into()));
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 || self.input_dim == 0 {
            return Err(Error::Config("classification sizes must be positive".into()));
        }
        check_fraction(self.flip_fraction)
    }

    /// Class handled by each task, main task first.
    pub fn task_classes(&self) -> Vec<usize> {
        std::iter::once(self.main_class)
            .chain((0..self.n_classes).filter(|&c| c != self.main_class))
            .collect()
    }
}

/// Flips exactly `floor(fraction * n)` labels, each to a uniformly chosen
/// different class.
pub fn apply_uniform_flip(
    labels: &[usize],
    fraction: f64,
    n_classes: usize,
    rng: &mut Rng,
) -> Result<(Vec<usize>, Vec<bool>)> {
    check_fraction(fraction)?;
    if n_classes < 2 {
        return Err(Error::Config("uniform flips need at least two classes".into()));
    }
    let mut out = labels.to_vec();
    let mut flags = vec![false; labels.len()];
    for i in rng.choose_distinct(labels.len(), exact_count(fraction, labels.len())) {
        let shift = 1 + rng.index(n_classes - 1);
        out[i] = (labels[i] + shift) % n_classes;
        flags[i] = true;
    }
    Ok((out, flags))
}

/// Sets `floor(fraction * n)` labels to `background`, drawn from the samples
/// not already in that class (all of them if fewer remain).
pub fn apply_background_flip(
    labels: &[usize],
    fraction: f64,
    background: usize,
    rng: &mut Rng,
) -> Result<(Vec<usize>, Vec<bool>)> {
    check_fraction(fraction)?;
    let pool: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != background).collect();
    let k = exact_count(fraction, labels.len()).min(pool.len());
    let mut out = labels.to_vec();
    let mut flags = vec![false; labels.len()];
    for p in rng.choose_distinct(pool.len(), k) {
        out[pool[p]] = background;
        flags[pool[p]] = true;
    }
    Ok((out, flags))
}

fn one_vs_rest(labels: &[usize], classes: &[usize]) -> Vec<Matrix> {
    classes
        .iter()
        .map(|&c| {
            let data = labels.iter().map(|&l| if l == c { 1.0 } else { 0.0 }).collect();
            Matrix::from_vec(labels.len(), 1, data).expect("one column")
        })
        .collect()
}

fn cluster_split(spec: &ClassifySpec, centers: &Matrix, n: usize, rng: &mut Rng) -> (Matrix, Vec<usize>) {
    let labels: Vec<usize> = (0..n).map(|_| rng.index(spec.n_classes)).collect();
    let mut x = Matrix::zeros(n, spec.input_dim);
    for (r, &l) in labels.iter().enumerate() {
        for (k, v) in x.row_mut(r).iter_mut().enumerate() {
            *v = centers.get(l, k) + spec.cluster_std * rng.normal();
        }
    }
    (x, labels)
}

/// Generates the cluster-classification splits with binary one-vs-rest
/// tasks. Flips touch training labels only; a flipped sample is flagged in
/// every task.
pub fn generate_classify(spec: &ClassifySpec) -> Result<Dataset> {
    spec.validate()?;
    let mut center_rng = Rng::derive(spec.seed, "classify-centers");
    let centers = gaussian_matrix(&mut center_rng, spec.n_classes, spec.input_dim, spec.center_std)?;
    let classes = spec.task_classes();
    let make = |labels: &[usize], x: Matrix, flags: Vec<bool>| Split {
        x,
        targets: one_vs_rest(labels, &classes),
        corrupted: vec![flags; classes.len()],
    };

    let (x, labels) = cluster_split(spec, &centers, spec.n_train, &mut Rng::derive(spec.seed, "classify-train"));
    let mut flip_rng = Rng::derive(spec.seed, "classify-flip");
    let (labels, flags) = match spec.flip_mode {
        FlipMode::None => (labels.clone(), vec![false; labels.len()]),
        FlipMode::Uniform => apply_uniform_flip(&labels, spec.flip_fraction, spec.n_classes, &mut flip_rng)?,
        FlipMode::Background => {
            apply_background_flip(&labels, spec.flip_fraction, spec.background_class, &mut flip_rng)?
        }
    };
    let train = make(&labels, x, flags);
    let (x, labels) = cluster_split(spec, &centers, spec.n_val, &mut Rng::derive(spec.seed, "classify-val"));
    let val = make(&labels, x, vec![false; spec.n_val]);
    let (x, labels) = cluster_split(spec, &centers, spec.n_test, &mut Rng::derive(spec.seed, "classify-test"));
    let test = make(&labels, x, vec![false; spec.n_test]);
    Ok(Dataset {
        train,
        val,
        test,
        losses: vec![LossKind::BceWithLogits; classes.len()],
        output_dims: vec![1; classes.len()],
        main_task: 0,
    })
}

/// Recovers class labels from one-vs-rest targets.
pub fn labels_from_targets(split: &Split, classes: &[usize]) -> Vec<usize> {
    (0..split.len())
        .map(|r| {
            let t = (0..classes.len())
                .find(|&t| split.targets[t].get(r, 0) == 1.0)
                .expect("exactly one positive task per row");
            classes[t]
        })
        .collect()
}
