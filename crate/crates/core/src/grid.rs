//! Hidden width × training-set size sweeps.
//!
//! Every cell trains a fresh model on a seeded subset of the training data,
//! then scores the ID and OOD test sets. Cells are independent jobs; their
//! seeds depend only on `(base_seed, width, train_size, repeat)`, so the
//! result of a cell never depends on which other cells are in the grid or in
//! which order they finish.

use std::collections::{BTreeMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bayes::{BayesModel, Method};
use crate::data::{self, Dataset, Split};
use crate::error::{Error, Result};
use crate::eval::{self, accuracy};
use crate::nn::{MlpSpec, TrainConfig};
use crate::uncertainty::format_sig6;

pub const RESULTS_FILE: &str = "results.ndjson";
pub const TIMINGS_FILE: &str = "timings.ndjson";
pub const FAILURES_FILE: &str = "failures.ndjson";
pub const WORKERS_ENV: &str = "UQFORGE_WORKERS";

pub fn default_widths() -> Vec<usize> {
    vec![16, 32, 64, 128, 256, 512]
}

pub fn default_train_sizes() -> Vec<usize> {
    vec![100, 250, 500, 1000, 2500, 5000, 10000]
}

fn default_repeats() -> usize {
    1
}

fn default_true() -> bool {
    true
}

/// Where a dataset comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetRef {
    /// Gaussian blobs, optionally moved off the class manifold by `shift` σ.
    Synth {
        c: usize,
        n_per_class: usize,
        dim: usize,
        separation: f64,
        seed: u64,
        #[serde(default)]
        shift: f64,
    },
    /// A directory of IDX or CIFAR-10 files.
    Dir { path: PathBuf, split: DirSplit },
    Idx { images: PathBuf, labels: PathBuf },
    Cifar10 { batches: Vec<PathBuf> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirSplit {
    Train,
    Test,
}

impl DatasetRef {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetRef::Synth {
                c,
                n_per_class,
                dim,
                separation,
                seed,
                shift,
            } => {
                if *shift == 0.0 {
                    data::synth_blobs(*c, *n_per_class, *dim, *separation, *seed)
                } else {
                    data::synth_shifted_blobs(*c, *n_per_class, *dim, *separation, *seed, *shift)
                }
            }
            DatasetRef::Dir { path, split } => data::load_dir(
                path,
                match split {
                    DirSplit::Train => Split::Train,
                    DirSplit::Test => Split::Test,
                },
            ),
            DatasetRef::Idx { images, labels } => data::load_idx(images, labels),
            DatasetRef::Cifar10 { batches } => data::load_cifar10(batches),
        }
    }
}

/// One sweep. Serialized form is the JSON config file read by `uqforge grid`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    /// Hidden width of both hidden layers, one value per column.
    #[serde(default = "default_widths")]
    pub widths: Vec<usize>,
    #[serde(default = "default_train_sizes")]
    pub train_sizes: Vec<usize>,
    pub method: Method,
    /// Ensemble members or MC-Dropout passes; the method default when absent.
    #[serde(default)]
    pub k: Option<usize>,
    /// Hidden-layer dropout; the method default when absent.
    #[serde(default)]
    pub dropout: Option<f64>,
    /// Optimizer settings; `seed` is the base seed of the sweep.
    #[serde(default)]
    pub train_cfg: TrainConfig,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default = "default_true")]
    pub stratify: bool,
    /// Truncate the larger of the ID/OOD test sets to the smaller one.
    #[serde(default)]
    pub balance: bool,
    pub train: DatasetRef,
    pub test_id: DatasetRef,
    pub test_ood: DatasetRef,
}

impl GridConfig {
    /// Sweep with the default axes and method defaults for everything else.
    pub fn new(method: Method, train: DatasetRef, test_id: DatasetRef, test_ood: DatasetRef) -> Self {
        GridConfig {
            widths: default_widths(),
            train_sizes: default_train_sizes(),
            method,
            k: None,
            dropout: None,
            train_cfg: TrainConfig::default(),
            repeats: 1,
            stratify: true,
            balance: false,
            train,
            test_id,
            test_ood,
        }
    }

    pub fn k(&self) -> usize {
        self.k.unwrap_or_else(|| self.method.default_k())
    }

    pub fn dropout(&self) -> f64 {
        self.dropout.unwrap_or_else(|| self.method.default_dropout())
    }

    pub fn base_seed(&self) -> u64 {
        self.train_cfg.seed
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.train_sizes.is_empty() {
            return Err(Error::Config("grid axes must be nonempty".into()));
        }
        if self.widths.contains(&0) || self.train_sizes.contains(&0) {
            return Err(Error::Config("grid axis values must be >= 1".into()));
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be >= 1".into()));
        }
        if self.k() == 0 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout()) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout())));
        }
        self.train_cfg.validate()
    }

    /// Cells in canonical order: width, then train size, then repeat.
    pub fn cells(&self) -> Vec<Cell> {
        let mut widths = self.widths.clone();
        widths.sort_unstable();
        widths.dedup();
        let mut sizes = self.train_sizes.clone();
        sizes.sort_unstable();
        sizes.dedup();
        let mut cells = Vec::new();
        for &width in &widths {
            for &train_size in &sizes {
                for repeat in 0..self.repeats {
                    cells.push(Cell {
                        width,
                        train_size,
                        repeat,
                    });
                }
            }
        }
        cells
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: GridConfig =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub width: usize,
    pub train_size: usize,
    pub repeat: usize,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable seed of one cell.
pub fn cell_seed(base_seed: u64, cell: Cell) -> u64 {
    let mut h = splitmix64(base_seed);
    for v in [cell.width as u64, cell.train_size as u64, cell.repeat as u64] {
        h = splitmix64(h ^ v);
    }
    h
}

/// Metrics of one trained cell. Uncertainties are normalized means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRecord {
    pub width: usize,
    pub train_size: usize,
    pub repeat: usize,
    pub seed: u64,
    pub method: Method,
    pub k: usize,
    pub epistemic_id: f64,
    pub aleatoric_id: f64,
    pub total_id: f64,
    pub epistemic_ood: f64,
    pub aleatoric_ood: f64,
    pub total_ood: f64,
    pub accuracy: f64,
    pub delta: f64,
    pub auc: f64,
    /// Kept out of `results.ndjson` so reruns stay byte-identical; persisted
    /// in `timings.ndjson` instead.
    #[serde(skip)]
    pub wall_time_s: f64,
}

impl GridRecord {
    pub fn cell(&self) -> Cell {
        Cell {
            width: self.width,
            train_size: self.train_size,
            repeat: self.repeat,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub width: usize,
    pub train_size: usize,
    pub repeat: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GridResult {
    /// Canonical cell order.
    pub records: Vec<GridRecord>,
    pub failures: Vec<CellFailure>,
}

/// The three datasets of a sweep, loaded once.
#[derive(Debug, Clone)]
pub struct GridData {
    pub train: Dataset,
    pub test_id: Dataset,
    pub test_ood: Dataset,
}

impl GridData {
    pub fn load(cfg: &GridConfig) -> Result<Self> {
        let d = GridData {
            train: cfg.train.load()?,
            test_id: cfg.test_id.load()?,
            test_ood: cfg.test_ood.load()?,
        };
        if d.train.dim() != d.test_id.dim() || d.train.dim() != d.test_ood.dim() {
            return Err(Error::Config(format!(
                "feature dims differ: train {}, test-ID {}, test-OOD {}",
                d.train.dim(),
                d.test_id.dim(),
                d.test_ood.dim()
            )));
        }
        if d.train.c() != d.test_id.c() {
            return Err(Error::Config("train and test-ID class counts differ".into()));
        }
        if let Some(&n) = cfg.train_sizes.iter().max() {
            if n > d.train.len() {
                return Err(Error::Config(format!(
                    "train size {n} exceeds the {} available examples",
                    d.train.len()
                )));
            }
        }
        Ok(d)
    }
}

/// Trains and evaluates one cell.
pub fn run_cell(cfg: &GridConfig, data: &GridData, cell: Cell) -> Result<GridRecord> {
    let start = Instant::now();
    let seed = cell_seed(cfg.base_seed(), cell);
    let train = data::subset(&data.train, cell.train_size, seed, cfg.stratify)?;
    let spec = MlpSpec::two_hidden(train.dim(), cell.width, cfg.dropout(), train.c())?;
    let train_cfg = TrainConfig { seed, ..cfg.train_cfg };
    let model = BayesModel::train(cfg.method, &spec, &train, &train_cfg, cfg.k())?;

    let (id, ood) = if cfg.balance {
        let (keep_id, keep_ood) = eval::balance_indices(data.test_id.len(), data.test_ood.len(), seed);
        (data.test_id.select(&keep_id), data.test_ood.select(&keep_ood))
    } else {
        (data.test_id.clone(), data.test_ood.clone())
    };
    let scores = eval::ood_scores(&model, id.inputs(), ood.inputs())?;
    let acc = accuracy(&scores.id_mean_probs, id.labels())?;
    let cmp = eval::compare_scores(&scores.id.epistemic, &scores.ood.epistemic)?;
    Ok(GridRecord {
        width: cell.width,
        train_size: cell.train_size,
        repeat: cell.repeat,
        seed,
        method: cfg.method,
        k: cfg.k(),
        epistemic_id: scores.id.mean_epistemic(),
        aleatoric_id: scores.id.mean_aleatoric(),
        total_id: scores.id.mean_total(),
        epistemic_ood: scores.ood.mean_epistemic(),
        aleatoric_ood: scores.ood.mean_aleatoric(),
        total_ood: scores.ood.mean_total(),
        accuracy: acc,
        delta: cmp.delta,
        auc: cmp.auc,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Worker count from `UQFORGE_WORKERS`, if set to a positive integer.
pub fn workers_from_env() -> Option<usize> {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}

/// Reads the complete records of a previous (possibly interrupted) run.
/// A torn final line is ignored.
pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<GridRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<GridRecord>(&line) {
            Ok(r) => out.push(r),
            Err(e) => log::warn!("skipping unreadable record in {}: {e}", path.display()),
        }
    }
    Ok(out)
}

/// Serializes records, one JSON object per line.
pub fn records_to_ndjson(records: &[GridRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

struct Appender {
    results: BufWriter<File>,
    timings: BufWriter<File>,
    failures: BufWriter<File>,
}

fn open_append(path: &Path) -> Result<BufWriter<File>> {
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn write_line(w: &mut BufWriter<File>, line: &str, path: &Path) -> Result<()> {
    w.write_all(line.as_bytes())
        .and_then(|_| w.write_all(b"\n"))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Runs every cell of `cfg`.
///
/// With `out_dir`, each finished cell is appended to `results.ndjson` as it
/// completes, cells already present there (same seed) are not recomputed,
/// and at the end the file is rewritten in canonical order together with
/// one heatmap CSV per metric. Failed cells are logged to
/// `failures.ndjson` and skipped.
pub fn run_grid(cfg: &GridConfig, out_dir: Option<&Path>) -> Result<GridResult> {
    cfg.validate()?;
    let data = GridData::load(cfg)?;
    let cells = cfg.cells();
    let wanted: HashSet<Cell> = cells.iter().copied().collect();

    let mut done: BTreeMap<Cell, GridRecord> = BTreeMap::new();
    let mut appender = None;
    let paths = out_dir.map(|dir| {
        (
            dir.join(RESULTS_FILE),
            dir.join(TIMINGS_FILE),
            dir.join(FAILURES_FILE),
        )
    });
    if let (Some(dir), Some((results, timings, failures))) = (out_dir, &paths) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        if results.is_file() {
            for r in read_records(results)? {
                let cell = r.cell();
                if wanted.contains(&cell) && r.seed == cell_seed(cfg.base_seed(), cell) && r.method == cfg.method {
                    done.insert(cell, r);
                }
            }
            // rewrite so a torn trailing line cannot corrupt later appends
            let kept: Vec<GridRecord> = done.values().cloned().collect();
            std::fs::write(results, records_to_ndjson(&kept)?).map_err(|e| Error::io(results, e))?;
        }
        appender = Some(Mutex::new(Appender {
            results: open_append(results)?,
            timings: open_append(timings)?,
            failures: open_append(failures)?,
        }));
    }
    let todo: Vec<Cell> = cells.iter().copied().filter(|c| !done.contains_key(c)).collect();
    log::info!("{} cells, {} already complete", cells.len(), cells.len() - todo.len());

    let run = || {
        todo.par_iter()
            .map(|&cell| {
                let outcome = run_cell(cfg, &data, cell);
                if let (Some(app), Some((rp, tp, fp))) = (&appender, &paths) {
                    let mut app = app.lock().expect("appender lock");
                    match &outcome {
                        Ok(r) => {
                            write_line(&mut app.results, &serde_json::to_string(r)?, rp)?;
                            let timing = serde_json::json!({
                                "width": r.width,
                                "train_size": r.train_size,
                                "repeat": r.repeat,
                                "wall_time_s": r.wall_time_s,
                            });
                            write_line(&mut app.timings, &timing.to_string(), tp)?;
                        }
                        Err(e) => {
                            let f = CellFailure {
                                width: cell.width,
                                train_size: cell.train_size,
                                repeat: cell.repeat,
                                error: e.to_string(),
                            };
                            write_line(&mut app.failures, &serde_json::to_string(&f)?, fp)?;
                        }
                    }
                }
                Ok((cell, outcome))
            })
            .collect::<Result<Vec<_>>>()
    };
    let outcomes = match workers_from_env() {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?
            .install(run)?,
        None => run()?,
    };

    let mut failures = Vec::new();
    for (cell, outcome) in outcomes {
        match outcome {
            Ok(r) => {
                done.insert(cell, r);
            }
            Err(e) => {
                log::error!("cell {cell:?} failed: {e}");
                failures.push(CellFailure {
                    width: cell.width,
                    train_size: cell.train_size,
                    repeat: cell.repeat,
                    error: e.to_string(),
                });
            }
        }
    }
    drop(appender);

    let records: Vec<GridRecord> = cells.iter().filter_map(|c| done.remove(c)).collect();
    let result = GridResult { records, failures };
    if let (Some(dir), Some((results, _, _))) = (out_dir, &paths) {
        let tmp = dir.join(format!("{RESULTS_FILE}.tmp"));
        std::fs::write(&tmp, records_to_ndjson(&result.records)?).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, results).map_err(|e| Error::io(results, e))?;
        write_metric_csvs(&result.records, dir)?;
    }
    Ok(result)
}

/// Per-cell quantity that can be drawn as a heatmap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Metric {
    EpistemicId,
    AleatoricId,
    TotalId,
    EpistemicOod,
    AleatoricOod,
    TotalOod,
    Accuracy,
    Delta,
    Auc,
}

impl Metric {
    pub const ALL: [Metric; 9] = [
        Metric::EpistemicId,
        Metric::AleatoricId,
        Metric::TotalId,
        Metric::EpistemicOod,
        Metric::AleatoricOod,
        Metric::TotalOod,
        Metric::Accuracy,
        Metric::Delta,
        Metric::Auc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::EpistemicId => "epistemic_id",
            Metric::AleatoricId => "aleatoric_id",
            Metric::TotalId => "total_id",
            Metric::EpistemicOod => "epistemic_ood",
            Metric::AleatoricOod => "aleatoric_ood",
            Metric::TotalOod => "total_ood",
            Metric::Accuracy => "accuracy",
            Metric::Delta => "delta",
            Metric::Auc => "auc",
        }
    }

    pub fn value(self, r: &GridRecord) -> f64 {
        match self {
            Metric::EpistemicId => r.epistemic_id,
            Metric::AleatoricId => r.aleatoric_id,
            Metric::TotalId => r.total_id,
            Metric::EpistemicOod => r.epistemic_ood,
            Metric::AleatoricOod => r.aleatoric_ood,
            Metric::TotalOod => r.total_ood,
            Metric::Accuracy => r.accuracy,
            Metric::Delta => r.delta,
            Metric::Auc => r.auc,
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let known: Vec<&str> = Metric::ALL.iter().map(|m| m.name()).collect();
                Error::Config(format!("unknown metric {s:?}; known: {}", known.join(", ")))
            })
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Rows are train sizes ascending, columns widths ascending. `None` marks a
/// cell with no records.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub metric: Metric,
    pub widths: Vec<usize>,
    pub train_sizes: Vec<usize>,
    pub values: Vec<Vec<Option<f64>>>,
}

impl Heatmap {
    pub fn get(&self, width: usize, train_size: usize) -> Option<f64> {
        let c = self.widths.iter().position(|&w| w == width)?;
        let r = self.train_sizes.iter().position(|&n| n == train_size)?;
        self.values[r][c]
    }

    pub fn defined_values(&self) -> Vec<f64> {
        self.values.iter().flatten().flatten().copied().collect()
    }

    /// `train_size,<width>,...` header then one line per train size, values
    /// with 6 significant digits, absent cells empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("train_size");
        for w in &self.widths {
            out.push_str(&format!(",{w}"));
        }
        out.push('\n');
        for (n, row) in self.train_sizes.iter().zip(&self.values) {
            out.push_str(&n.to_string());
            for v in row {
                out.push(',');
                if let Some(v) = v {
                    out.push_str(&format_sig6(*v));
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Mean of `metric` over repeats for every (train size, width) cell.
///
/// Repeats are summed in repeat order, so the matrix does not depend on the
/// order of `records`.
pub fn heatmap_matrix(records: &[GridRecord], metric: Metric) -> Heatmap {
    let mut widths: Vec<usize> = records.iter().map(|r| r.width).collect();
    widths.sort_unstable();
    widths.dedup();
    let mut sizes: Vec<usize> = records.iter().map(|r| r.train_size).collect();
    sizes.sort_unstable();
    sizes.dedup();

    let mut cells: BTreeMap<(usize, usize), Vec<(usize, u64)>> = BTreeMap::new();
    for r in records {
        let v = metric.value(r);
        cells
            .entry((r.train_size, r.width))
            .or_default()
            .push((r.repeat, v.to_bits()));
    }
    let values = sizes
        .iter()
        .map(|&n| {
            widths
                .iter()
                .map(|&w| {
                    cells.get_mut(&(n, w)).map(|vals| {
                        vals.sort_unstable();
                        vals.iter().map(|&(_, b)| f64::from_bits(b)).sum::<f64>() / vals.len() as f64
                    })
                })
                .collect()
        })
        .collect();
    Heatmap {
        metric,
        widths,
        train_sizes: sizes,
        values,
    }
}

/// Parses a CSV written by [`Heatmap::to_csv`].
pub fn parse_heatmap_csv(metric: Metric, text: &str) -> Result<Heatmap> {
    let bad = |why: &str| Error::format("<heatmap csv>", why.to_string());
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty"))?;
    let widths = header
        .split(',')
        .skip(1)
        .map(|w| w.parse::<usize>().map_err(|_| bad("bad width")))
        .collect::<Result<Vec<_>>>()?;
    let mut train_sizes = Vec::new();
    let mut values = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let mut fields = line.split(',');
        train_sizes.push(
            fields
                .next()
                .and_then(|f| f.parse::<usize>().ok())
                .ok_or_else(|| bad("bad train size"))?,
        );
        let row = fields
            .map(|f| {
                if f.is_empty() {
                    Ok(None)
                } else {
                    f.parse::<f64>().map(Some).map_err(|_| bad("bad value"))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        if row.len() != widths.len() {
            return Err(bad("ragged row"));
        }
        values.push(row);
    }
    Ok(Heatmap {
        metric,
        widths,
        train_sizes,
        values,
    })
}

pub fn write_metric_csvs(records: &[GridRecord], dir: &Path) -> Result<()> {
    for metric in Metric::ALL {
        let path = dir.join(format!("{}.csv", metric.name()));
        std::fs::write(&path, heatmap_matrix(records, metric).to_csv()).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Spearman rank correlation with average ranks for ties; `None` when
/// either side is constant or fewer than two points are given.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// How the epistemic heatmap compares with the expected trends.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrendReport {
    /// Per train size: Spearman ρ of epistemic uncertainty against width.
    pub width_rho: Vec<(usize, Option<f64>)>,
    /// Per width: Spearman ρ of epistemic uncertainty against train size.
    pub size_rho: Vec<(usize, Option<f64>)>,
    /// Every defined `size_rho` is negative.
    pub decreases_with_data: bool,
    /// Every defined `width_rho` is positive.
    pub increases_with_width: bool,
    /// Value at (largest width, smallest train size).
    pub corner_value: Option<f64>,
    pub grid_median: f64,
    /// The corner where uncertainty should peak sits below the grid median.
    pub hole: bool,
}

impl TrendReport {
    pub fn summary_lines(&self) -> Vec<String> {
        let fmt = |r: &Option<f64>| r.map_or("n/a".to_string(), |v| format!("{v:+.3}"));
        let mut lines = vec![
            format!(
                "decreases with train size: {}",
                if self.decreases_with_data { "PASS" } else { "FAIL" }
            ),
            format!(
                "increases with width: {}",
                if self.increases_with_width { "PASS" } else { "FAIL" }
            ),
            format!(
                "hole at (max width, min size): {} (corner {}, median {})",
                if self.hole { "YES" } else { "no" },
                self.corner_value.map_or("n/a".into(), format_sig6),
                format_sig6(self.grid_median)
            ),
        ];
        lines.push(format!(
            "rho vs size per width: {}",
            self.size_rho
                .iter()
                .map(|(w, r)| format!("{w}:{}", fmt(r)))
                .collect::<Vec<_>>()
                .join(" ")
        ));
        lines.push(format!(
            "rho vs width per size: {}",
            self.width_rho
                .iter()
                .map(|(n, r)| format!("{n}:{}", fmt(r)))
                .collect::<Vec<_>>()
                .join(" ")
        ));
        lines
    }
}

/// Checks the ID epistemic heatmap of `records` against the expected trends.
pub fn trend_check(records: &[GridRecord]) -> Result<TrendReport> {
    trend_check_heatmap(&heatmap_matrix(records, Metric::EpistemicId))
}

pub fn trend_check_heatmap(map: &Heatmap) -> Result<TrendReport> {
    if map.widths.len() < 2 || map.train_sizes.len() < 2 {
        return Err(Error::Config(format!(
            "trend check needs two values per axis, got {} widths and {} sizes",
            map.widths.len(),
            map.train_sizes.len()
        )));
    }
    let axis_rho = |pairs: Vec<(f64, f64)>| {
        let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        spearman(&x, &y)
    };
    let width_rho: Vec<(usize, Option<f64>)> = map
        .train_sizes
        .iter()
        .zip(&map.values)
        .map(|(&n, row)| {
            let pairs = map
                .widths
                .iter()
                .zip(row)
                .filter_map(|(&w, v)| v.map(|v| (w as f64, v)))
                .collect();
            (n, axis_rho(pairs))
        })
        .collect();
    let size_rho: Vec<(usize, Option<f64>)> = map
        .widths
        .iter()
        .enumerate()
        .map(|(c, &w)| {
            let pairs = map
                .train_sizes
                .iter()
                .zip(&map.values)
                .filter_map(|(&n, row)| row[c].map(|v| (n as f64, v)))
                .collect();
            (w, axis_rho(pairs))
        })
        .collect();
    let all_defined = |v: &[(usize, Option<f64>)], pred: fn(f64) -> bool| {
        let defined: Vec<f64> = v.iter().filter_map(|(_, r)| *r).collect();
        !defined.is_empty() && defined.into_iter().all(pred)
    };
    let mut vals = map.defined_values();
    if vals.is_empty() {
        return Err(Error::Empty("trend check on an empty heatmap"));
    }
    vals.sort_by(f64::total_cmp);
    let grid_median = eval::quantile_sorted(&vals, 0.5);
    let corner_value = map.values[0][map.widths.len() - 1];
    Ok(TrendReport {
        decreases_with_data: all_defined(&size_rho, |r| r < 0.0),
        increases_with_width: all_defined(&width_rho, |r| r > 0.0),
        width_rho,
        size_rho,
        corner_value,
        grid_median,
        hole: corner_value.is_some_and(|v| v < grid_median),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(width: usize, train_size: usize, repeat: usize, epistemic: f64) -> GridRecord {
        GridRecord {
            width,
            train_size,
            repeat,
            seed: 0,
            method: Method::Ensemble,
            k: 2,
            epistemic_id: epistemic,
            aleatoric_id: 0.0,
            total_id: epistemic,
            epistemic_ood: 0.0,
            aleatoric_ood: 0.0,
            total_ood: 0.0,
            accuracy: 1.0,
            delta: 0.0,
            auc: 0.5,
            wall_time_s: 0.0,
        }
    }

    fn fixture(f: impl Fn(usize, usize) -> f64) -> Vec<GridRecord> {
        let mut out = Vec::new();
        for (i, &w) in [8, 32, 128].iter().enumerate() {
            for (j, &n) in [100, 1000, 5000].iter().enumerate() {
                out.push(record(w, n, 0, f(i, j)));
            }
        }
        out
    }

    #[test]
    fn cell_seed_is_stable_and_distinct() {
        let a = Cell { width: 8, train_size: 100, repeat: 0 };
        let b = Cell { width: 100, train_size: 8, repeat: 0 };
        assert_eq!(cell_seed(1, a), cell_seed(1, a));
        assert_ne!(cell_seed(1, a), cell_seed(1, b));
        assert_ne!(cell_seed(1, a), cell_seed(2, a));
        assert_ne!(cell_seed(1, a), cell_seed(1, Cell { repeat: 1, ..a }));
    }

    #[test]
    fn heatmap_means_repeats_and_orders_axes() {
        let recs = vec![
            record(32, 100, 1, 0.4),
            record(8, 1000, 0, 0.9),
            record(32, 100, 0, 0.2),
            record(8, 100, 0, 0.5),
        ];
        let h = heatmap_matrix(&recs, Metric::EpistemicId);
        assert_eq!(h.widths, vec![8, 32]);
        assert_eq!(h.train_sizes, vec![100, 1000]);
        assert!((h.get(32, 100).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(h.get(8, 1000), Some(0.9));
        assert_eq!(h.get(32, 1000), None);

        let mut shuffled = recs.clone();
        shuffled.reverse();
        assert_eq!(heatmap_matrix(&shuffled, Metric::EpistemicId), h);
    }

    #[test]
    fn heatmap_single_repeat_is_raw() {
        let recs = fixture(|i, j| (i * 3 + j) as f64 / 10.0);
        let h = heatmap_matrix(&recs, Metric::EpistemicId);
        assert_eq!((h.values.len(), h.values[0].len()), (3, 3));
        for r in &recs {
            assert_eq!(h.get(r.width, r.train_size), Some(r.epistemic_id));
        }
    }

    #[test]
    fn csv_round_trip() {
        let recs = vec![record(8, 100, 0, 0.125), record(32, 1000, 0, 0.5)];
        let h = heatmap_matrix(&recs, Metric::EpistemicId);
        let csv = h.to_csv();
        assert_eq!(csv, "train_size,8,32\n100,0.125,\n1000,,0.5\n");
        assert_eq!(parse_heatmap_csv(Metric::EpistemicId, &csv).unwrap(), h);
    }

    #[test]
    fn metric_names() {
        for m in Metric::ALL {
            assert_eq!(m.name().parse::<Metric>().unwrap(), m);
        }
        assert!("bogus".parse::<Metric>().is_err());
    }

    #[test]
    fn spearman_basics() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[1.0, 5.0, 9.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0], &[4.0, 4.0]), None);
        // one adjacent swap among four points
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[4.0, 2.0, 3.0, 1.0]).unwrap();
        assert!((r + 0.8).abs() < 1e-12);
    }

    #[test]
    fn trend_detects_expected_directions() {
        let t = trend_check(&fixture(|_, j| 1.0 - j as f64 * 0.3)).unwrap();
        assert!(t.decreases_with_data);
        let t = trend_check(&fixture(|i, _| 0.1 + i as f64 * 0.2)).unwrap();
        assert!(t.increases_with_width);
        assert!(!t.decreases_with_data);
        assert!(!t.hole);
    }

    #[test]
    fn trend_flags_hole() {
        // diagonal ridge with a depression at large width / little data
        let t = trend_check(&fixture(|i, j| match (i, j) {
            (2, 0) => 0.01,
            _ => 0.3 + 0.1 * (i as f64 - j as f64).abs().mul_add(-1.0, 2.0),
        }))
        .unwrap();
        assert!(t.hole);
        assert!(!t.increases_with_width);
    }

    #[test]
    fn trend_rejects_degenerate_axis() {
        let recs = vec![record(8, 100, 0, 0.1), record(8, 1000, 0, 0.2)];
        assert!(matches!(trend_check(&recs), Err(Error::Config(_))));
    }

    #[test]
    fn config_json_defaults() {
        let text = r#"{
            "method": "mc_dropout",
            "train": {"kind": "synth", "c": 3, "n_per_class": 10, "dim": 2, "separation": 5.0, "seed": 1},
            "test_id": {"kind": "synth", "c": 3, "n_per_class": 10, "dim": 2, "separation": 5.0, "seed": 2},
            "test_ood": {"kind": "synth", "c": 3, "n_per_class": 10, "dim": 2, "separation": 5.0, "seed": 3, "shift": 10.0}
        }"#;
        let cfg: GridConfig = serde_json::from_str(text).unwrap();
        assert_eq!(cfg.k(), 30);
        assert_eq!(cfg.dropout(), 0.5);
        assert_eq!(cfg.widths, default_widths());
        assert_eq!(cfg.train_sizes, default_train_sizes());
        assert_eq!(cfg.repeats, 1);
        assert!(cfg.stratify);
        assert_eq!(cfg.train_cfg, TrainConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn records_serialize_without_wall_time() {
        let mut r = record(8, 100, 0, 0.25);
        r.wall_time_s = 3.5;
        let line = serde_json::to_string(&r).unwrap();
        assert!(!line.contains("wall_time"));
        let back: GridRecord = serde_json::from_str(&line).unwrap();
        assert_eq!(back.epistemic_id, 0.25);
    }
}
