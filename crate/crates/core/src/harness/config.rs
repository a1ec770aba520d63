//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{ClassifySpec, FlipMode, ScaleConvention, ToySpec};
use crate::error::{Error, Result};
use crate::model::{Activation, Architecture};
use crate::weighting::{Algorithm, WeighterConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Toy,
    Classify,
}

impl DatasetKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(DatasetKind::Toy),
            "classify" => Ok(DatasetKind::Classify),
            other => Err(Error::Config(format!("unknown dataset {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Toy => "toy",
            DatasetKind::Classify => "classify",
        }
    }
}

/// Everything needed to reproduce one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub weighting: WeighterConfig,
    pub lr: f64,
    pub batch_size: usize,
    /// Validation batch size for the meta-gradient; 0 means `batch_size`.
    pub val_batch_size: usize,
    pub steps: usize,
    pub shared_layers: usize,
    pub head_layers: usize,
    pub shared_width: usize,
    pub head_width: usize,
    pub shared_activation: Activation,
    pub head_activation: Activation,
    pub dataset: DatasetKind,
    pub noise: f64,
    pub noise_main_only: bool,
    pub toy_output_dim: usize,
    pub toy_sigma: f64,
    pub scale_convention: ScaleConvention,
    pub flip: FlipMode,
    pub flip_frac: f64,
    pub n_classes: usize,
    pub background_class: usize,
    pub center_std: f64,
    pub cluster_std: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub data_seed: u64,
    pub seed: u64,
    pub eval_every: usize,
    /// Early-stopping patience in steps; 0 disables it.
    pub patience: usize,
    pub divergence_threshold: f64,
    pub taylor_check: bool,
    pub log_weights: bool,
    pub out: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            weighting: WeighterConfig::new(Algorithm::SlGrad),
            lr: 0.1,
            batch_size: 32,
            val_batch_size: 0,
            steps: 5000,
            shared_layers: 3,
            head_layers: 4,
            shared_width: 64,
            head_width: 32,
            shared_activation: Activation::Tanh,
            head_activation: Activation::Relu,
            dataset: DatasetKind::Toy,
            noise: 0.0,
            noise_main_only: false,
            toy_output_dim: 1,
            toy_sigma: 1.0,
            scale_convention: ScaleConvention::Std,
            flip: FlipMode::None,
            flip_frac: 0.0,
            n_classes: 4,
            background_class: 1,
            center_std: 1.0,
            cluster_std: 1.0,
            n_train: 1000,
            n_val: 200,
            n_test: 200,
            data_seed: 0,
            seed: 0,
            eval_every: 50,
            patience: 500,
            divergence_threshold: 1e6,
            taylor_check: false,
            log_weights: false,
            out: None,
        }
    }
}

/// Keys accepted in config files, in echo order.
pub const CONFIG_KEYS: &[&str] = &[
    "algorithm",
    "lr",
    "batch_size",
    "val_batch_size",
    "steps",
    "shared_layers",
    "head_layers",
    "shared_width",
    "head_width",
    "shared_activation",
    "head_activation",
    "dataset",
    "noise",
    "noise_main_only",
    "toy_output_dim",
    "toy_sigma",
    "scale_convention",
    "flip",
    "flip_frac",
    "n_classes",
    "background_class",
    "center_std",
    "cluster_std",
    "n_train",
    "n_val",
    "n_test",
    "data_seed",
    "seed",
    "eval_every",
    "patience",
    "divergence_threshold",
    "taylor_check",
    "log_weights",
    "out",
    "main_task",
    "slgrad_cosine",
    "olaux_horizon",
    "olaux_lr",
    "gradnorm_alpha",
    "gradnorm_lr",
    "cagrad_c",
    "cagrad_iters",
];

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean {v:?} for {key}"))),
    }
}

impl TrainConfig {
    /// Toy regression config using the grid-optimal settings reported for
    /// `algorithm`.
    pub fn toy_optimal(algorithm: Algorithm, noise: f64, seed: u64) -> Self {
        let (lr, bs, sl, tl) = match algorithm {
            Algorithm::OlAux => (0.1, 64, 2, 2),
            Algorithm::PcGrad => (0.1, 32, 3, 3),
            Algorithm::CaGrad => (0.1, 64, 2, 2),
            Algorithm::CosSim => (0.01, 64, 3, 4),
            Algorithm::Static => (0.01, 32, 4, 4),
            Algorithm::GradNorm => (0.1, 32, 2, 2),
            Algorithm::Random => (0.01, 64, 3, 4),
            Algorithm::SlGrad => (0.1, 32, 3, 4),
        };
        TrainConfig {
            weighting: WeighterConfig::new(algorithm),
            lr,
            batch_size: bs,
            shared_layers: sl,
            head_layers: tl,
            noise,
            seed,
            ..TrainConfig::default()
        }
    }

    pub fn algorithm(&self) -> Algorithm {
        self.weighting.algorithm
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "algorithm" => self.weighting.algorithm = Algorithm::parse(v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "val_batch_size" => self.val_batch_size = parse_num(key, v)?,
            "steps" => self.steps = parse_num(key, v)?,
            "shared_layers" => self.shared_layers = parse_num(key, v)?,
            "head_layers" => self.head_layers = parse_num(key, v)?,
            "shared_width" => self.shared_width = parse_num(key, v)?,
            "head_width" => self.head_width = parse_num(key, v)?,
            "shared_activation" => self.shared_activation = Activation::parse(v)?,
            "head_activation" => self.head_activation = Activation::parse(v)?,
            "dataset" => self.dataset = DatasetKind::parse(v)?,
            "noise" => self.noise = parse_num(key, v)?,
            "noise_main_only" => self.noise_main_only = parse_bool(key, v)?,
            "toy_output_dim" => self.toy_output_dim = parse_num(key, v)?,
            "toy_sigma" => self.toy_sigma = parse_num(key, v)?,
            "scale_convention" => {
                self.scale_convention = match v {
                    "std" => ScaleConvention::Std,
                    "variance" => ScaleConvention::Variance,
                    _ => return Err(Error::Config(format!("bad scale_convention {v:?}"))),
                }
            }
            "flip" => self.flip = FlipMode::parse(v)?,
            "flip_frac" => self.flip_frac = parse_num(key, v)?,
            "n_classes" => self.n_classes = parse_num(key, v)?,
            "background_class" => self.background_class = parse_num(key, v)?,
            "center_std" => self.center_std = parse_num(key, v)?,
            "cluster_std" => self.cluster_std = parse_num(key, v)?,
            "n_train" => self.n_train = parse_num(key, v)?,
            "n_val" => self.n_val = parse_num(key, v)?,
            "n_test" => self.n_test = parse_num(key, v)?,
            "data_seed" => self.data_seed = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "eval_every" => self.eval_every = parse_num(key, v)?,
            "patience" => self.patience = parse_num(key, v)?,
            "divergence_threshold" => self.divergence_threshold = parse_num(key, v)?,
            "taylor_check" => self.taylor_check = parse_bool(key, v)?,
            "log_weights" => self.log_weights = parse_bool(key, v)?,
            "out" => self.out = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            "main_task" => self.weighting.main_task = parse_num(key, v)?,
            "slgrad_cosine" => self.weighting.slgrad_cosine = parse_bool(key, v)?,
            "olaux_horizon" => self.weighting.olaux_horizon = parse_num(key, v)?,
            "olaux_lr" => self.weighting.olaux_lr = parse_num(key, v)?,
            "gradnorm_alpha" => self.weighting.gradnorm_alpha = parse_num(key, v)?,
            "gradnorm_lr" => self.weighting.gradnorm_lr = parse_num(key, v)?,
            "cagrad_c" => self.weighting.cagrad_c = parse_num(key, v)?,
            "cagrad_iters" => self.weighting.cagrad_iters = parse_num(key, v)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        let w = &self.weighting;
        match key {
            "algorithm" => w.algorithm.name().into(),
            "lr" => self.lr.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "val_batch_size" => self.val_batch_size.to_string(),
            "steps" => self.steps.to_string(),
            "shared_layers" => self.shared_layers.to_string(),
            "head_layers" => self.head_layers.to_string(),
            "shared_width" => self.shared_width.to_string(),
            "head_width" => self.head_width.to_string(),
            "shared_activation" => self.shared_activation.name().into(),
            "head_activation" => self.head_activation.name().into(),
            "dataset" => self.dataset.name().into(),
            "noise" => self.noise.to_string(),
            "noise_main_only" => self.noise_main_only.to_string(),
            "toy_output_dim" => self.toy_output_dim.to_string(),
            "toy_sigma" => self.toy_sigma.to_string(),
            "scale_convention" => match self.scale_convention {
                ScaleConvention::Std => "std".into(),
                ScaleConvention::Variance => "variance".into(),
            },
            "flip" => self.flip.name().into(),
            "flip_frac" => self.flip_frac.to_string(),
            "n_classes" => self.n_classes.to_string(),
            "background_class" => self.background_class.to_string(),
            "center_std" => self.center_std.to_string(),
            "cluster_std" => self.cluster_std.to_string(),
            "n_train" => self.n_train.to_string(),
            "n_val" => self.n_val.to_string(),
            "n_test" => self.n_test.to_string(),
            "data_seed" => self.data_seed.to_string(),
            "seed" => self.seed.to_string(),
            "eval_every" => self.eval_every.to_string(),
            "patience" => self.patience.to_string(),
            "divergence_threshold" => self.divergence_threshold.to_string(),
            "taylor_check" => self.taylor_check.to_string(),
            "log_weights" => self.log_weights.to_string(),
            "out" => self.out.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            "main_task" => w.main_task.to_string(),
            "slgrad_cosine" => w.slgrad_cosine.to_string(),
            "olaux_horizon" => w.olaux_horizon.to_string(),
            "olaux_lr" => w.olaux_lr.to_string(),
            "gradnorm_alpha" => w.gradnorm_alpha.to_string(),
            "gradnorm_lr" => w.gradnorm_lr.to_string(),
            "cagrad_c" => w.cagrad_c.to_string(),
            "cagrad_iters" => w.cagrad_iters.to_string(),
            _ => unreachable!("key list and getter out of sync: {key}"),
        }
    }

    /// Parses `key = value` lines on top of the defaults. Blank lines and
    /// `#` comments are ignored.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Every key with its effective value, one per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in CONFIG_KEYS {
            writeln!(s, "{key} = {}", self.get(key)).expect("writing to a String");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.steps == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("steps, batch_size and eval_every must be positive".into()));
        }
        if self.shared_layers == 0 {
            return Err(Error::Config("at least one shared layer is required".into()));
        }
        if !(0.0..=1.0).contains(&self.noise) || !(0.0..=1.0).contains(&self.flip_frac) {
            return Err(Error::Config("noise and flip_frac must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn effective_val_batch(&self) -> usize {
        if self.val_batch_size == 0 {
            self.batch_size
        } else {
            self.val_batch_size
        }
    }

    pub fn n_tasks(&self) -> usize {
        match self.dataset {
            DatasetKind::Toy => 2,
            DatasetKind::Classify => self.n_classes,
        }
    }

    pub fn toy_spec(&self) -> ToySpec {
        let aux_noise = if self.noise_main_only { 0.0 } else { self.noise };
        ToySpec {
            output_dim: self.toy_output_dim,
            sigma: vec![self.toy_sigma; 2],
            convention: self.scale_convention,
            noise_fraction: vec![self.noise, aux_noise],
            n_train: self.n_train,
            n_val: self.n_val,
            n_test: self.n_test,
            seed: self.data_seed,
            ..ToySpec::default()
        }
    }

    pub fn classify_spec(&self) -> ClassifySpec {
        ClassifySpec {
            n_classes: self.n_classes,
            center_std: self.center_std,
            cluster_std: self.cluster_std,
            flip_mode: self.flip,
            flip_fraction: self.flip_frac,
            background_class: self.background_class,
            n_train: self.n_train,
            n_val: self.n_val,
            n_test: self.n_test,
            seed: self.data_seed,
            ..ClassifySpec::default()
        }
    }

    pub fn architecture(&self, input_dim: usize, output_dims: Vec<usize>) -> Architecture {
        Architecture {
            input_dim,
            shared: vec![self.shared_width; self.shared_layers],
            head_hidden: vec![self.head_width; self.head_layers],
            output_dims,
            shared_activation: self.shared_activation,
            head_activation: self.head_activation,
        }
    }

    /// Short label for the data setting, used to group suite results.
    pub fn setting_label(&self) -> String {
        match self.dataset {
            DatasetKind::Toy => {
                let scope = if self.noise_main_only { "-main" } else { "" };
                format!("toy-noise{}{scope}", self.noise)
            }
            DatasetKind::Classify => format!("classify-{}{}", self.flip.name(), self.flip_frac),
        }
    }
}
