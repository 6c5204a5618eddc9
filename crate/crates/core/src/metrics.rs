//! Classification accuracy and OOD-detection metrics.
//!
//! Detection metrics treat a higher score as "more in-distribution"; a sample
//! is accepted as in-distribution when `score >= τ`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::LabeledDataset;
use crate::matrix::Matrix;
use crate::nn::{self, MlpParams, NnError};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{0} scores are empty")]
    Empty(&'static str),
    #[error("dataset has {dataset} classes but the model has {model}")]
    ClassMismatch { dataset: usize, model: usize },
    #[error("group thresholds must satisfy low < high, got ({0}, {1})")]
    Thresholds(u64, u64),
    #[error(transparent)]
    Model(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Argmax of each row, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

pub fn predict(params: &MlpParams, features: &Matrix) -> Result<Vec<usize>> {
    let logits = nn::forward(params, features)?;
    Ok((0..logits.rows()).map(|i| argmax(logits.row(i))).collect())
}

/// Overall and per-class accuracy. Classes absent from the test set have no
/// per-class entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub overall_acc: f64,
    pub per_class_acc: Vec<Option<f64>>,
    pub class_counts: Vec<u64>,
}

pub fn accuracy_from_predictions(
    predictions: &[usize],
    labels: &[usize],
    num_classes: usize,
) -> ClassificationReport {
    let mut correct = vec![0u64; num_classes];
    let mut counts = vec![0u64; num_classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        counts[y] += 1;
        if p == y {
            correct[y] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    let hits: u64 = correct.iter().sum();
    ClassificationReport {
        overall_acc: if total == 0 {
            0.0
        } else {
            hits as f64 / total as f64
        },
        per_class_acc: correct
            .iter()
            .zip(&counts)
            .map(|(&c, &n)| (n > 0).then(|| c as f64 / n as f64))
            .collect(),
        class_counts: counts,
    }
}

pub fn accuracy(params: &MlpParams, dataset: &LabeledDataset) -> Result<ClassificationReport> {
    if dataset.num_classes() != params.num_classes() {
        return Err(MetricsError::ClassMismatch {
            dataset: dataset.num_classes(),
            model: params.num_classes(),
        });
    }
    let preds = predict(params, dataset.features())?;
    Ok(accuracy_from_predictions(
        &preds,
        dataset.labels(),
        dataset.num_classes(),
    ))
}

/// Maximum softmax probability per row.
pub fn msp_scores(params: &MlpParams, features: &Matrix) -> Result<Vec<f64>> {
    let logits = nn::forward(params, features)?;
    Ok((0..logits.rows())
        .map(|i| msp_of_logits(logits.row(i)))
        .collect())
}

pub fn msp_of_logits(row: &[f64]) -> f64 {
    let (probs, _) = nn::softmax_row(row);
    probs.into_iter().fold(0.0, f64::max)
}

fn non_empty(scores: &[f64], what: &'static str) -> Result<()> {
    if scores.is_empty() {
        Err(MetricsError::Empty(what))
    } else {
        Ok(())
    }
}

/// False-positive rate on `out_scores` at the largest threshold (taken from
/// the in-distribution scores) that still accepts at least 95% of
/// `in_scores`.
pub fn fpr_at_95_tpr(in_scores: &[f64], out_scores: &[f64]) -> Result<f64> {
    non_empty(in_scores, "in-distribution")?;
    non_empty(out_scores, "out-of-distribution")?;
    let n = in_scores.len();
    let mut sorted = in_scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    // Smallest k with k/n >= 0.95, in integers.
    let k = (95 * n).div_ceil(100);
    let tau = sorted[k - 1];
    let accepted = out_scores.iter().filter(|&&s| s >= tau).count();
    Ok(accepted as f64 / out_scores.len() as f64)
}

/// `P(s_in > s_out) + ½·P(s_in = s_out)` over all pairs.
pub fn auroc(in_scores: &[f64], out_scores: &[f64]) -> Result<f64> {
    non_empty(in_scores, "in-distribution")?;
    non_empty(out_scores, "out-of-distribution")?;
    let mut out = out_scores.to_vec();
    out.sort_by(f64::total_cmp);
    // Twice the Mann–Whitney statistic, kept integral.
    let mut doubled: u64 = 0;
    for &s in in_scores {
        let below = out.partition_point(|&o| o < s);
        let not_above = out.partition_point(|&o| o <= s);
        doubled += 2 * below as u64 + (not_above - below) as u64;
    }
    Ok(doubled as f64 / (2.0 * in_scores.len() as f64 * out.len() as f64))
}

/// Which side is treated as the positive class for precision–recall.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositiveClass {
    In,
    /// OOD samples are positives, ranked by negated score.
    #[default]
    Out,
}

/// Step-interpolated average precision with thresholds at every distinct
/// score: `Σ_t (R_t − R_{t−1}) · P_t`.
pub fn average_precision(positive: &[f64], negative: &[f64]) -> Result<f64> {
    non_empty(positive, "positive")?;
    non_empty(negative, "negative")?;
    let mut all: Vec<(f64, bool)> = positive
        .iter()
        .map(|&s| (s, true))
        .chain(negative.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let total_pos = positive.len() as f64;
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    let mut i = 0;
    while i < all.len() {
        let s = all[i].0;
        while i < all.len() && all[i].0 == s {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / total_pos;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(area)
}

pub fn aupr(in_scores: &[f64], out_scores: &[f64], positive: PositiveClass) -> Result<f64> {
    non_empty(in_scores, "in-distribution")?;
    non_empty(out_scores, "out-of-distribution")?;
    match positive {
        PositiveClass::In => average_precision(in_scores, out_scores),
        PositiveClass::Out => {
            let pos: Vec<f64> = out_scores.iter().map(|s| -s).collect();
            let neg: Vec<f64> = in_scores.iter().map(|s| -s).collect();
            average_precision(&pos, &neg)
        }
    }
}

/// Class-count cutoffs for many/medium/few-shot groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupThresholds {
    pub low: u64,
    pub high: u64,
}

impl Default for GroupThresholds {
    fn default() -> Self {
        Self { low: 20, high: 100 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
}

/// Unweighted mean of per-class accuracy within each training-count bucket:
/// few `n < low`, medium `low <= n <= high`, many `n > high`.
pub fn group_accuracy(
    per_class_acc: &[Option<f64>],
    train_counts: &[u64],
    thresholds: GroupThresholds,
) -> Result<GroupAccuracy> {
    if thresholds.low >= thresholds.high {
        return Err(MetricsError::Thresholds(thresholds.low, thresholds.high));
    }
    let mut sums = [(0.0, 0usize); 3];
    for (acc, &n) in per_class_acc.iter().zip(train_counts) {
        let Some(acc) = acc else { continue };
        let bucket = if n > thresholds.high {
            0
        } else if n >= thresholds.low {
            1
        } else {
            2
        };
        sums[bucket].0 += acc;
        sums[bucket].1 += 1;
    }
    let mean = |(s, c): (f64, usize)| (c > 0).then(|| s / c as f64);
    Ok(GroupAccuracy {
        many: mean(sums[0]),
        medium: mean(sums[1]),
        few: mean(sums[2]),
    })
}

/// Detection scores for one OOD pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodScores {
    pub pool: String,
    pub fpr95: f64,
    pub auroc: f64,
    pub aupr: f64,
    pub aupr_positive: PositiveClass,
}

pub fn ood_scores(
    pool: &str,
    in_scores: &[f64],
    out_scores: &[f64],
    positive: PositiveClass,
) -> Result<OodScores> {
    Ok(OodScores {
        pool: pool.to_string(),
        fpr95: fpr_at_95_tpr(in_scores, out_scores)?,
        auroc: auroc(in_scores, out_scores)?,
        aupr: aupr(in_scores, out_scores, positive)?,
        aupr_positive: positive,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall_acc: f64,
    pub per_class_acc: Vec<Option<f64>>,
    pub group_acc: GroupAccuracy,
    pub ood: Vec<OodScores>,
}
