use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use slgrad_core::harness::{grid_search, run_suite, Grid, SuiteSummary};
use slgrad_core::{train, Algorithm, TrainConfig};

mod plot;

#[derive(Parser)]
#[command(name = "slgrad", version, about = "Sample-level multi-task weighting experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write its metrics.
    Train(Common),
    /// Run algorithms over several seeds and summarize the final test metric.
    Suite {
        #[command(flatten)]
        common: Common,
        /// Comma-separated algorithm names; defaults to all of them.
        #[arg(long, value_delimiter = ',')]
        algorithms: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Exhaustive grid search on the first seed, re-run of the winner on all seeds.
    Grid {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        grid_lr: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        grid_batch_size: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        grid_shared_layers: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        grid_head_layers: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Render SVG figures from a run directory written by `train`.
    Plot {
        /// Directory holding metrics.csv (and optionally weights.csv, taylor.csv).
        input: PathBuf,
        /// Where to write the figures; defaults to the input directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the tuned toy hyperparameters of the chosen algorithm.
    #[arg(long)]
    tuned: bool,
    #[arg(long)]
    algorithm: Option<String>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    flip: Option<String>,
    #[arg(long)]
    flip_frac: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    taylor_check: bool,
    #[arg(long)]
    log_weights: bool,
    /// Any other config key, as `key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    /// Defaults, then the config file, then flags.
    fn resolve(&self) -> Result<TrainConfig> {
        let file_text = match &self.config {
            Some(p) => Some(fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?),
            None => None,
        };
        let mut cfg = TrainConfig::default();
        if self.tuned {
            let mut probe = TrainConfig::default();
            if let Some(t) = &file_text {
                probe.apply_text(t)?;
            }
            if let Some(a) = &self.algorithm {
                probe.set("algorithm", a)?;
            }
            cfg = TrainConfig::toy_optimal(probe.algorithm(), 0.0, 0);
        }
        if let Some(t) = &file_text {
            cfg.apply_text(t)?;
        }
        let flags: [(&str, Option<String>); 10] = [
            ("algorithm", self.algorithm.clone()),
            ("dataset", self.dataset.clone()),
            ("noise", self.noise.map(|v| v.to_string())),
            ("flip", self.flip.clone()),
            ("flip_frac", self.flip_frac.map(|v| v.to_string())),
            ("lr", self.lr.map(|v| v.to_string())),
            ("batch_size", self.batch_size.map(|v| v.to_string())),
            ("steps", self.steps.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("out", self.out.as_ref().map(|p| p.display().to_string())),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, &v)?;
            }
        }
        if self.taylor_check {
            cfg.taylor_check = true;
        }
        if self.log_weights {
            cfg.log_weights = true;
        }
        for kv in &self.overrides {
            let Some((k, v)) = kv.split_once('=') else {
                bail!("--set expects key=value, got {kv:?}");
            };
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn out_dir(cfg: &TrainConfig, fallback: &str) -> PathBuf {
    cfg.out.clone().unwrap_or_else(|| PathBuf::from(fallback))
}

fn write_summary(dir: &Path, summary: &SuiteSummary) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("summary.json"), summary.to_json()?)?;
    summary.write_table(fs::File::create(dir.join("summary.csv"))?)?;
    summary.write_table(std::io::stdout())?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(common) => {
            let cfg = common.resolve()?;
            let dir = out_dir(
                &cfg,
                &format!("runs/{}-{}-seed{}", cfg.setting_label(), cfg.algorithm().name(), cfg.seed),
            );
            print!("{}", cfg.to_text());
            let record = train(&cfg)?;
            record.write_outputs(&dir, &cfg)?;
            println!(
                "{} {} seed {}: {:?}, best val {} at step {}, test {} -> {}",
                record.algorithm,
                record.setting,
                record.seed,
                record.status,
                slgrad_core::harness::fmt9(record.best_val_main),
                record.best_step,
                slgrad_core::harness::fmt9(record.final_test_main),
                dir.display()
            );
        }
        Command::Suite {
            common,
            algorithms,
            seeds,
        } => {
            let base = common.resolve()?;
            let algs = if algorithms.is_empty() {
                Algorithm::ALL.to_vec()
            } else {
                algorithms.iter().map(|a| Algorithm::parse(a)).collect::<slgrad_core::Result<_>>()?
            };
            let mut configs = Vec::new();
            for alg in algs {
                let mut c = if common.tuned {
                    let tuned = TrainConfig::toy_optimal(alg, base.noise, base.seed);
                    TrainConfig {
                        lr: common.lr.unwrap_or(tuned.lr),
                        batch_size: common.batch_size.unwrap_or(tuned.batch_size),
                        shared_layers: tuned.shared_layers,
                        head_layers: tuned.head_layers,
                        ..base.clone()
                    }
                } else {
                    base.clone()
                };
                c.set("algorithm", alg.name())?;
                configs.push(c);
            }
            let summary = run_suite(&configs, &seeds)?;
            write_summary(&out_dir(&base, &format!("runs/suite-{}", base.setting_label())), &summary)?;
        }
        Command::Grid {
            common,
            grid_lr,
            grid_batch_size,
            grid_shared_layers,
            grid_head_layers,
            seeds,
        } => {
            let base = common.resolve()?;
            let grid = Grid {
                lr: grid_lr,
                batch_size: grid_batch_size,
                shared_layers: grid_shared_layers,
                head_layers: grid_head_layers,
            };
            let result = grid_search(&base, &grid, &seeds)?;
            let dir = out_dir(
                &base,
                &format!("runs/grid-{}-{}", base.setting_label(), base.algorithm().name()),
            );
            fs::create_dir_all(&dir)?;
            let mut w = csv::Writer::from_path(dir.join("grid.csv"))?;
            w.write_record(["lr", "batch_size", "shared_layers", "head_layers", "best_val_main"])?;
            for (c, score) in &result.evaluated {
                w.write_record([
                    c.lr.to_string(),
                    c.batch_size.to_string(),
                    c.shared_layers.to_string(),
                    c.head_layers.to_string(),
                    slgrad_core::harness::fmt9(*score),
                ])?;
            }
            w.flush()?;
            fs::write(dir.join("best_config.txt"), result.best.to_text())?;
            println!(
                "best: lr {} batch_size {} shared_layers {} head_layers {}",
                result.best.lr, result.best.batch_size, result.best.shared_layers, result.best.head_layers
            );
            write_summary(&dir, &SuiteSummary { rows: vec![result.rerun] })?;
        }
        Command::Plot { input, out } => {
            let out = out.unwrap_or_else(|| input.clone());
            for path in plot::render_run(&input, &out)? {
                println!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
