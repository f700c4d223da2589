//! Downstream metrics: accuracy, box-plot statistics of epistemic
//! uncertainty split by correctness, and ID-vs-OOD separation (mean gap and
//! ROC-AUC with OOD as the positive class).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bayes::{predictive_mean, PosteriorSampler};
use crate::error::{Error, Result};
use crate::ndcore::{Array2, ProbMatrix};
use crate::uncertainty::{self, UncertaintyReport};

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
pub fn accuracy(mean_probs: &ProbMatrix, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Empty("accuracy of an empty set"));
    }
    if labels.len() != mean_probs.n() {
        return Err(Error::Shape(format!(
            "{} labels for {} predictions",
            labels.len(),
            mean_probs.n()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= mean_probs.c()) {
        return Err(Error::Domain(format!("label {bad} outside [0, {})", mean_probs.c())));
    }
    let hits = mean_probs
        .argmax_rows()
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl Summary {
    /// Five-number summary (type-7 quantiles) plus mean; `None` when empty.
    pub fn of(values: &[f64]) -> Option<Summary> {
        if values.is_empty() {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Some(Summary {
            mean: uncertainty::mean(values),
            min: sorted[0],
            q1: quantile_sorted(&sorted, 0.25),
            median: quantile_sorted(&sorted, 0.5),
            q3: quantile_sorted(&sorted, 0.75),
            max: sorted[sorted.len() - 1],
        })
    }
}

/// Linear-interpolation quantile (Hyndman–Fan type 7) of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub count: usize,
    pub summary: Option<Summary>,
}

impl GroupStats {
    fn of(values: &[f64]) -> Self {
        GroupStats {
            count: values.len(),
            summary: Summary::of(values),
        }
    }
}

/// Epistemic-uncertainty statistics for all, correctly classified and
/// misclassified inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub all: GroupStats,
    pub good: GroupStats,
    pub mis: GroupStats,
}

pub fn split_stats(report: &UncertaintyReport, mean_probs: &ProbMatrix, labels: &[usize]) -> Result<SplitStats> {
    if report.len() != mean_probs.n() || labels.len() != report.len() {
        return Err(Error::Shape(format!(
            "report of {} rows, {} predictions, {} labels",
            report.len(),
            mean_probs.n(),
            labels.len()
        )));
    }
    let predicted = mean_probs.argmax_rows();
    let (mut good, mut mis) = (Vec::new(), Vec::new());
    for ((&e, &p), &y) in report.epistemic.iter().zip(&predicted).zip(labels) {
        if p == y {
            good.push(e);
        } else {
            mis.push(e);
        }
    }
    Ok(SplitStats {
        all: GroupStats::of(&report.epistemic),
        good: GroupStats::of(&good),
        mis: GroupStats::of(&mis),
    })
}

/// Mann–Whitney ROC-AUC with OOD as the positive class: over all
/// `(id, ood)` pairs, 1 when the OOD score is higher, 1/2 on ties.
///
/// Runs in `O((n+m) log(n+m))`; pair credits are accumulated as integers so
/// the result is the exactly rounded pair average.
pub fn roc_auc(scores_id: &[f64], scores_ood: &[f64]) -> Result<f64> {
    if scores_id.is_empty() || scores_ood.is_empty() {
        return Err(Error::Empty("ROC-AUC needs both ID and OOD scores"));
    }
    if scores_id.iter().chain(scores_ood).any(|v| v.is_nan()) {
        return Err(Error::Domain("ROC-AUC scores contain NaN".into()));
    }
    let mut all: Vec<(f64, bool)> = scores_id
        .iter()
        .map(|&s| (s, false))
        .chain(scores_ood.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    // twice the pair credit, so ties stay integral
    let mut credit2: u128 = 0;
    let mut id_below: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        let (mut g_id, mut g_ood) = (0u128, 0u128);
        // -0.0 and 0.0 tie
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                g_ood += 1;
            } else {
                g_id += 1;
            }
            j += 1;
        }
        credit2 += g_ood * (2 * id_below + g_id);
        id_below += g_id;
        i = j;
    }
    let pairs2 = 2 * scores_id.len() as u128 * scores_ood.len() as u128;
    Ok(credit2 as f64 / pairs2 as f64)
}

/// Mean-gap and AUC comparison of ID against OOD epistemic scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OodComparison {
    pub mean_id: f64,
    pub mean_ood: f64,
    /// `mean_ood - mean_id`.
    pub delta: f64,
    pub auc: f64,
    pub n_id: usize,
    pub n_ood: usize,
}

pub fn compare_scores(scores_id: &[f64], scores_ood: &[f64]) -> Result<OodComparison> {
    let auc = roc_auc(scores_id, scores_ood)?;
    let mean_id = uncertainty::mean(scores_id);
    let mean_ood = uncertainty::mean(scores_ood);
    Ok(OodComparison {
        mean_id,
        mean_ood,
        delta: mean_ood - mean_id,
        auc,
        n_id: scores_id.len(),
        n_ood: scores_ood.len(),
    })
}

/// Normalized epistemic uncertainty of every ID and OOD input.
#[derive(Debug, Clone, PartialEq)]
pub struct OodScores {
    pub id: UncertaintyReport,
    pub ood: UncertaintyReport,
    pub id_mean_probs: ProbMatrix,
}

pub fn ood_scores<M: PosteriorSampler + ?Sized>(model: &M, id_inputs: &Array2, ood_inputs: &Array2) -> Result<OodScores> {
    if id_inputs.cols() != ood_inputs.cols() {
        return Err(Error::Shape(format!(
            "ID inputs have {} features, OOD inputs {}",
            id_inputs.cols(),
            ood_inputs.cols()
        )));
    }
    if id_inputs.rows() == 0 || ood_inputs.rows() == 0 {
        return Err(Error::Empty("OOD comparison needs nonempty ID and OOD sets"));
    }
    let id_samples = model.sample_posterior_predictive(id_inputs)?;
    let ood_samples = model.sample_posterior_predictive(ood_inputs)?;
    Ok(OodScores {
        id: uncertainty::report(&id_samples)?,
        ood: uncertainty::report(&ood_samples)?,
        id_mean_probs: predictive_mean(&id_samples),
    })
}

/// Samples the posterior predictive on both sets and compares their
/// epistemic uncertainty. All pairs enter the AUC; see [`balance_inputs`]
/// for equal-size comparisons.
pub fn ood_compare<M: PosteriorSampler + ?Sized>(model: &M, id_inputs: &Array2, ood_inputs: &Array2) -> Result<OodComparison> {
    let scores = ood_scores(model, id_inputs, ood_inputs)?;
    compare_scores(&scores.id.epistemic, &scores.ood.epistemic)
}

/// Truncates the larger set to the size of the smaller one by a seeded
/// draw without replacement (original order kept).
pub fn balance_inputs(id: &Array2, ood: &Array2, seed: u64) -> (Array2, Array2) {
    let (keep_id, keep_ood) = balance_indices(id.rows(), ood.rows(), seed);
    (id.select_rows(&keep_id), ood.select_rows(&keep_ood))
}

/// Row indices kept by [`balance_inputs`], ascending.
pub fn balance_indices(n_id: usize, n_ood: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let n = n_id.min(n_ood);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = |len: usize| {
        if len == n {
            (0..n).collect()
        } else {
            let mut idx = sample(&mut rng, len, n).into_vec();
            idx.sort_unstable();
            idx
        }
    };
    (keep(n_id), keep(n_ood))
}

/// Contents of `ood_report.json`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OodReport {
    pub mean_id: f64,
    pub mean_ood: f64,
    pub delta: f64,
    pub auc: f64,
    pub n_id: usize,
    pub n_ood: usize,
    pub seed: u64,
}

impl OodReport {
    pub fn new(cmp: &OodComparison, seed: u64) -> Self {
        OodReport {
            mean_id: cmp.mean_id,
            mean_ood: cmp.mean_ood,
            delta: cmp.delta,
            auc: cmp.auc,
            n_id: cmp.n_id,
            n_ood: cmp.n_ood,
            seed,
        }
    }
}
