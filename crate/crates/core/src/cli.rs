//! Command-line driver. Each subcommand resolves its flags into a config,
//! echoes it, and hands off to the library.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::bayes::{self, predictive_mean, BayesModel, Method, PosteriorSampler};
use crate::data::{self, Dataset, Split};
use crate::error::{Error, Result};
use crate::eval::{self, OodReport};
use crate::grid::{self, GridConfig, Metric};
use crate::nn::{MlpSpec, TrainConfig, DEFAULT_EPOCHS};
use crate::render;
use crate::uncertainty;

pub const DEFAULT_WIDTH: usize = 128;

#[derive(Debug, Parser)]
#[command(name = "uqforge", version, about = "Epistemic and aleatoric uncertainty of deep ensembles and MC-Dropout MLPs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train an ensemble or MC-Dropout model and report test accuracy and uncertainties.
    Train(TrainArgs),
    /// Compare epistemic uncertainty of a trained model on ID and OOD inputs.
    EvalOod(EvalOodArgs),
    /// Run a width × train-size sweep from a JSON config.
    Grid(GridArgs),
    /// Render heatmap CSVs and SVGs from grid results.
    Report(ReportArgs),
}

/// `c,n,dim,sep,seed`: `n` examples per class of `c` Gaussian blobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SynthArg {
    pub c: usize,
    pub n_per_class: usize,
    pub dim: usize,
    pub separation: f64,
    pub seed: u64,
}

impl FromStr for SynthArg {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let f: Vec<&str> = s.split(',').map(str::trim).collect();
        if f.len() != 5 {
            return Err(format!("expected c,n,dim,sep,seed, got {s:?}"));
        }
        let int = |v: &str, what: &str| v.parse::<usize>().map_err(|_| format!("bad {what} {v:?}"));
        Ok(SynthArg {
            c: int(f[0], "class count")?,
            n_per_class: int(f[1], "count")?,
            dim: int(f[2], "dim")?,
            separation: f[3].parse().map_err(|_| format!("bad separation {:?}", f[3]))?,
            seed: f[4].parse().map_err(|_| format!("bad seed {:?}", f[4]))?,
        })
    }
}

impl SynthArg {
    fn load(&self, shift: f64) -> Result<Dataset> {
        if shift == 0.0 {
            data::synth_blobs(self.c, self.n_per_class, self.dim, self.separation, self.seed)
        } else {
            data::synth_shifted_blobs(self.c, self.n_per_class, self.dim, self.separation, self.seed, shift)
        }
    }

    /// Held-out draw from the same distribution.
    fn test_counterpart(&self) -> SynthArg {
        SynthArg {
            seed: self.seed.wrapping_add(1),
            ..*self
        }
    }
}

/// `c,n,dim,sep,seed,shift`: blobs moved `shift` σ off the class manifold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ShiftedSynthArg {
    pub blobs: SynthArg,
    pub shift: f64,
}

impl FromStr for ShiftedSynthArg {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (head, shift) = s
            .rsplit_once(',')
            .ok_or_else(|| format!("expected c,n,dim,sep,seed,shift, got {s:?}"))?;
        Ok(ShiftedSynthArg {
            blobs: head.parse()?,
            shift: shift.trim().parse().map_err(|_| format!("bad shift {shift:?}"))?,
        })
    }
}

#[derive(Debug, Args)]
#[group(id = "source", required = true, multiple = false)]
pub struct DataSource {
    /// Directory with MNIST-style IDX files or CIFAR-10 binary batches.
    #[arg(long, group = "source")]
    pub data_dir: Option<PathBuf>,
    /// Synthetic blobs: c,n,dim,sep,seed (n per class).
    #[arg(long, group = "source")]
    pub synth: Option<SynthArg>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub source: DataSource,
    #[arg(long, default_value = "ensemble")]
    pub method: Method,
    /// Ensemble members or MC-Dropout passes [default: 10 / 30].
    #[arg(long)]
    pub k: Option<usize>,
    /// Units in each of the two hidden layers.
    #[arg(long, default_value_t = DEFAULT_WIDTH)]
    pub width: usize,
    /// Train on a seeded subset of this many examples.
    #[arg(long)]
    pub train_size: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_EPOCHS)]
    pub epochs: usize,
    #[arg(long, default_value_t = crate::nn::DEFAULT_LEARNING_RATE)]
    pub lr: f64,
    #[arg(long, default_value_t = crate::nn::DEFAULT_MOMENTUM)]
    pub momentum: f64,
    #[arg(long, default_value_t = crate::nn::DEFAULT_BATCH_SIZE)]
    pub batch: usize,
    /// Hidden-layer dropout [default: 0.1 ensemble, 0.5 MC-Dropout].
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output model directory.
    #[arg(long, default_value = "model")]
    pub out: PathBuf,
    /// Sample the subset uniformly instead of per class.
    #[arg(long)]
    pub no_stratify: bool,
}

#[derive(Debug, Args)]
pub struct EvalOodArgs {
    /// Model directory written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    /// In-distribution test data.
    #[command(flatten)]
    pub source: DataSource,
    /// Directory holding the OOD test set.
    #[arg(long, conflicts_with = "ood_synth", required_unless_present = "ood_synth")]
    pub ood_data_dir: Option<PathBuf>,
    /// Shifted blobs as OOD set: c,n,dim,sep,seed,shift.
    #[arg(long)]
    pub ood_synth: Option<ShiftedSynthArg>,
    /// Truncate the larger test set to the size of the smaller one.
    #[arg(long)]
    pub balance: bool,
    /// Seed for --balance.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for ood_report.json.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    /// JSON grid config.
    #[arg(long)]
    pub config: PathBuf,
    /// Results directory; completed cells found here are not rerun.
    #[arg(long, default_value = "grid_out")]
    pub out: PathBuf,
    /// Override the base seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub method: Option<Method>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub balance: bool,
    #[arg(long)]
    pub no_stratify: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Grid output directory or a results.ndjson file.
    #[arg(long)]
    pub results: PathBuf,
    /// Metric to render [default: all].
    #[arg(long)]
    pub metric: Option<Metric>,
    /// Output directory [default: next to the results].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::EvalOod(a) => cmd_eval_ood(&a),
        Command::Grid(a) => cmd_grid(&a),
        Command::Report(a) => cmd_report(&a),
    }
}

fn echo<T: Serialize>(what: &str, value: &T) -> Result<()> {
    println!("{what}: {}", serde_json::to_string(value)?);
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

#[derive(Debug, Serialize)]
struct ResolvedTrain<'a> {
    data: String,
    method: Method,
    k: usize,
    width: usize,
    dropout: f64,
    train_size: Option<usize>,
    stratify: bool,
    train_cfg: &'a TrainConfig,
    seed: u64,
    out: &'a Path,
}

#[derive(Debug, Serialize)]
struct TrainMetrics {
    method: Method,
    k: usize,
    seed: u64,
    eval_set: String,
    n_eval: usize,
    accuracy: f64,
    mean_total: f64,
    mean_aleatoric: f64,
    mean_epistemic: f64,
}

fn load_train_and_test(source: &DataSource) -> Result<(Dataset, Dataset, String)> {
    match (&source.data_dir, &source.synth) {
        (Some(dir), _) => {
            let train = data::load_dir(dir, Split::Train)?;
            match data::load_dir(dir, Split::Test) {
                Ok(test) => Ok((train, test, "test".into())),
                Err(e) => {
                    log::warn!("no test split in {} ({e}); evaluating on the training data", dir.display());
                    let test = train.clone();
                    Ok((train, test, "train".into()))
                }
            }
        }
        (None, Some(s)) => Ok((s.load(0.0)?, s.test_counterpart().load(0.0)?, "synth-heldout".into())),
        (None, None) => Err(Error::Config("one of --data-dir or --synth is required".into())),
    }
}

fn source_label(source: &DataSource) -> String {
    match (&source.data_dir, &source.synth) {
        (Some(d), _) => d.display().to_string(),
        (None, Some(s)) => format!("synth:{},{},{},{},{}", s.c, s.n_per_class, s.dim, s.separation, s.seed),
        (None, None) => String::new(),
    }
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let train_cfg = TrainConfig {
        learning_rate: a.lr,
        momentum: a.momentum,
        batch_size: a.batch,
        epochs: a.epochs,
        seed: a.seed,
        ..TrainConfig::default()
    };
    train_cfg.validate()?;
    let k = a.k.unwrap_or_else(|| a.method.default_k());
    let dropout = a.dropout.unwrap_or_else(|| a.method.default_dropout());
    echo(
        "config",
        &ResolvedTrain {
            data: source_label(&a.source),
            method: a.method,
            k,
            width: a.width,
            dropout,
            train_size: a.train_size,
            stratify: !a.no_stratify,
            train_cfg: &train_cfg,
            seed: a.seed,
            out: &a.out,
        },
    )?;

    let (mut train, test, eval_set) = load_train_and_test(&a.source)?;
    if let Some(n) = a.train_size {
        if n > train.len() {
            return Err(Error::Config(format!(
                "--train-size {n} exceeds the {} available examples",
                train.len()
            )));
        }
        train = data::subset(&train, n, a.seed, !a.no_stratify)?;
    }
    let spec = MlpSpec::two_hidden(train.dim(), a.width, dropout, train.c())?;
    let model = BayesModel::train(a.method, &spec, &train, &train_cfg, k)?;
    bayes::save_model(&model, &a.out)?;

    let samples = model.sample_posterior_predictive(test.inputs())?;
    let report = uncertainty::report(&samples)?;
    let accuracy = eval::accuracy(&predictive_mean(&samples), test.labels())?;
    let metrics = TrainMetrics {
        method: a.method,
        k,
        seed: a.seed,
        eval_set,
        n_eval: test.len(),
        accuracy,
        mean_total: report.mean_total(),
        mean_aleatoric: report.mean_aleatoric(),
        mean_epistemic: report.mean_epistemic(),
    };
    write_json(&a.out.join("metrics.json"), &metrics)?;
    println!("accuracy: {accuracy}");
    println!("mean_total: {}", metrics.mean_total);
    println!("mean_aleatoric: {}", metrics.mean_aleatoric);
    println!("mean_epistemic: {}", metrics.mean_epistemic);
    Ok(())
}

#[derive(Debug, Serialize)]
struct ResolvedEval<'a> {
    model: &'a Path,
    id: String,
    ood: String,
    balance: bool,
    seed: u64,
    out: &'a Path,
}

fn load_test_split(dir: &Path) -> Result<Dataset> {
    data::load_dir(dir, Split::Test)
}

pub fn cmd_eval_ood(a: &EvalOodArgs) -> Result<()> {
    let ood_label = match (&a.ood_data_dir, &a.ood_synth) {
        (Some(d), _) => d.display().to_string(),
        (None, Some(s)) => format!(
            "synth:{},{},{},{},{},{}",
            s.blobs.c, s.blobs.n_per_class, s.blobs.dim, s.blobs.separation, s.blobs.seed, s.shift
        ),
        (None, None) => return Err(Error::Config("one of --ood-data-dir or --ood-synth is required".into())),
    };
    echo(
        "config",
        &ResolvedEval {
            model: &a.model,
            id: source_label(&a.source),
            ood: ood_label,
            balance: a.balance,
            seed: a.seed,
            out: &a.out,
        },
    )?;
    let model = bayes::load_model(&a.model)?;
    let id = match (&a.source.data_dir, &a.source.synth) {
        (Some(d), _) => load_test_split(d)?,
        (None, Some(s)) => s.load(0.0)?,
        (None, None) => unreachable!("clap enforces a data source"),
    };
    let ood = match (&a.ood_data_dir, &a.ood_synth) {
        (Some(d), _) => load_test_split(d)?,
        (None, Some(s)) => s.blobs.load(s.shift)?,
        (None, None) => unreachable!("checked above"),
    };
    let (id_x, ood_x) = if a.balance {
        eval::balance_inputs(id.inputs(), ood.inputs(), a.seed)
    } else {
        (id.inputs().clone(), ood.inputs().clone())
    };
    let cmp = eval::ood_compare(&model, &id_x, &ood_x)?;
    let report = OodReport::new(&cmp, a.seed);
    create_dir(&a.out)?;
    write_json(&a.out.join("ood_report.json"), &report)?;
    println!("delta: {}", report.delta);
    println!("auc: {}", report.auc);
    Ok(())
}

pub fn cmd_grid(a: &GridArgs) -> Result<()> {
    let mut cfg = GridConfig::from_json_file(&a.config)?;
    if let Some(m) = a.method {
        cfg.method = m;
    }
    if let Some(s) = a.seed {
        cfg.train_cfg.seed = s;
    }
    if let Some(k) = a.k {
        cfg.k = Some(k);
    }
    if let Some(e) = a.epochs {
        cfg.train_cfg.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.train_cfg.learning_rate = lr;
    }
    if let Some(m) = a.momentum {
        cfg.train_cfg.momentum = m;
    }
    if let Some(b) = a.batch {
        cfg.train_cfg.batch_size = b;
    }
    if let Some(d) = a.dropout {
        cfg.dropout = Some(d);
    }
    cfg.balance |= a.balance;
    cfg.stratify &= !a.no_stratify;
    cfg.validate()?;
    echo("config", &cfg)?;
    println!("seed: {}", cfg.base_seed());

    create_dir(&a.out)?;
    write_json(&a.out.join("config.resolved.json"), &cfg)?;
    let result = grid::run_grid(&cfg, Some(&a.out))?;
    println!(
        "cells: {} complete, {} failed; results in {}",
        result.records.len(),
        result.failures.len(),
        a.out.join(grid::RESULTS_FILE).display()
    );
    if !result.failures.is_empty() {
        for f in &result.failures {
            eprintln!(
                "cell width={} train_size={} repeat={} failed: {}",
                f.width, f.train_size, f.repeat, f.error
            );
        }
        return Err(Error::Consistency(format!("{} grid cells failed", result.failures.len())));
    }
    Ok(())
}

pub fn cmd_report(a: &ReportArgs) -> Result<()> {
    let results = if a.results.is_dir() {
        a.results.join(grid::RESULTS_FILE)
    } else {
        a.results.clone()
    };
    if !results.is_file() {
        return Err(Error::Config(format!("no results file at {}", results.display())));
    }
    let out = match &a.out {
        Some(o) => o.clone(),
        None => results.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(".")),
    };
    let metrics: Vec<Metric> = match a.metric {
        Some(m) => vec![m],
        None => Metric::ALL.to_vec(),
    };
    echo(
        "config",
        &serde_json::json!({
            "results": results,
            "metrics": metrics.iter().map(|m| m.name()).collect::<Vec<_>>(),
            "out": out,
        }),
    )?;

    let records = grid::read_records(&results)?;
    if records.is_empty() {
        return Err(Error::Config(format!("{} holds no records", results.display())));
    }
    let trend = match grid::trend_check(&records) {
        Ok(t) => Some(t),
        Err(e) => {
            log::warn!("trend check skipped: {e}");
            None
        }
    };
    create_dir(&out)?;
    for metric in metrics {
        let map = grid::heatmap_matrix(&records, metric);
        let csv = out.join(format!("{}.csv", metric.name()));
        std::fs::write(&csv, map.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let svg = out.join(format!("{}.svg", metric.name()));
        let title = format!("{} ({})", metric.name(), records[0].method.as_str());
        std::fs::write(&svg, render::heatmap_svg(&map, &title, trend.as_ref())).map_err(|e| Error::io(&svg, e))?;
        println!("wrote {} and {}", csv.display(), svg.display());
    }
    if let Some(t) = &trend {
        for line in t.summary_lines() {
            println!("{line}");
        }
    }
    Ok(())
}
