use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::softmax_rows;

/// Class-probability rows with their argmax predictions and true labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    scores: Array2<f64>,
    predicted: Vec<usize>,
    truth: Vec<usize>,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in row.into_iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

impl PredictionSet {
    pub fn from_scores(scores: Array2<f64>, truth: Vec<usize>) -> Result<Self> {
        let (n, k) = scores.dim();
        if n != truth.len() {
            return Err(Error::invalid(format!("{n} score rows for {} labels", truth.len())));
        }
        if k == 0 {
            return Err(Error::invalid("score rows are empty"));
        }
        if let Some(l) = truth.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(format!("label {l} out of range for {k} classes")));
        }
        for (i, row) in scores.rows().into_iter().enumerate() {
            let sum: f64 = row.sum();
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!("score row {i} is not a probability distribution")));
            }
        }
        let predicted = scores.rows().into_iter().map(|r| argmax(r.iter().copied())).collect();
        Ok(Self { scores, predicted, truth })
    }

    pub fn from_logits(logits: &Array2<f64>, truth: Vec<usize>) -> Result<Self> {
        Self::from_scores(softmax_rows(logits), truth)
    }

    pub fn scores(&self) -> &Array2<f64> {
        &self.scores
    }

    pub fn predicted(&self) -> &[usize] {
        &self.predicted
    }

    pub fn truth(&self) -> &[usize] {
        &self.truth
    }

    pub fn class_count(&self) -> usize {
        self.scores.ncols()
    }

    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }

    /// `matrix[truth][predicted]` counts.
    pub fn confusion(&self) -> Array2<usize> {
        let k = self.class_count();
        let mut m = Array2::zeros((k, k));
        for (&t, &p) in self.truth.iter().zip(&self.predicted) {
            m[[t, p]] += 1;
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    /// Percentage per class present in the truth labels.
    pub per_class: BTreeMap<usize, f64>,
    /// Unweighted mean over those classes.
    pub average: f64,
    /// Classes with no samples, excluded from the average.
    pub absent: Vec<usize>,
}

pub fn per_class_accuracy(preds: &PredictionSet) -> ClassAccuracy {
    let m = preds.confusion();
    let mut per_class = BTreeMap::new();
    let mut absent = Vec::new();
    for c in 0..preds.class_count() {
        let total: usize = m.row(c).sum();
        if total == 0 {
            absent.push(c);
        } else {
            per_class.insert(c, 100.0 * m[[c, c]] as f64 / total as f64);
        }
    }
    if !absent.is_empty() {
        log::warn!("classes {absent:?} have no samples and are left out of the average");
    }
    let average = if per_class.is_empty() {
        0.0
    } else {
        per_class.values().sum::<f64>() / per_class.len() as f64
    };
    ClassAccuracy { per_class, average, absent }
}

pub fn overall_accuracy(preds: &PredictionSet) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    let correct = preds.truth.iter().zip(&preds.predicted).filter(|(t, p)| t == p).count();
    100.0 * correct as f64 / preds.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Scores for one positive class.
    Binary { positive: usize },
    /// Unweighted mean of per-class scores.
    Macro,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Percentages. Zero denominators give zero.
pub fn prf_from_counts(tp: usize, fp: usize, fn_: usize) -> PrecisionRecall {
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let p = ratio(tp, tp + fp);
    let r = ratio(tp, tp + fn_);
    let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    PrecisionRecall { precision: 100.0 * p, recall: 100.0 * r, f1: 100.0 * f1 }
}

pub fn precision_recall_f1(preds: &PredictionSet, averaging: Averaging) -> Result<PrecisionRecall> {
    let m = preds.confusion();
    let k = preds.class_count();
    let class_prf = |c: usize| {
        let tp = m[[c, c]];
        let fp = m.column(c).sum() - tp;
        let fn_ = m.row(c).sum() - tp;
        prf_from_counts(tp, fp, fn_)
    };
    match averaging {
        Averaging::Binary { positive } if positive < k => Ok(class_prf(positive)),
        Averaging::Binary { positive } => {
            Err(Error::invalid(format!("positive class {positive} out of range for {k} classes")))
        }
        Averaging::Macro => {
            let all: Vec<_> = (0..k).map(class_prf).collect();
            let mean = |f: fn(&PrecisionRecall) -> f64| all.iter().map(f).sum::<f64>() / k as f64;
            Ok(PrecisionRecall {
                precision: mean(|x| x.precision),
                recall: mean(|x| x.recall),
                f1: mean(|x| x.f1),
            })
        }
    }
}

/// Area under the ROC curve as a percentage: the probability that a random
/// positive outscores a random negative, ties counting one half.
pub fn roc_auc(scores: &[f64], truth: &[bool]) -> Result<f64> {
    if scores.len() != truth.len() {
        return Err(Error::invalid(format!("{} scores for {} labels", scores.len(), truth.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("scores contain NaN"));
    }
    let pos = truth.iter().filter(|&&t| t).count();
    let neg = truth.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("ROC-AUC needs both positive and negative samples".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of positive ranks with average ranks for ties.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg_rank * order[i..=j].iter().filter(|&&o| truth[o]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(100.0 * u / (pos as f64 * neg as f64))
}

/// ROC curve points `(false positive rate, true positive rate)` from the
/// strictest threshold down, starting at `(0, 0)`.
pub fn roc_curve(scores: &[f64], truth: &[bool]) -> Vec<(f64, f64)> {
    let pos = truth.iter().filter(|&&t| t).count().max(1) as f64;
    let neg = truth.iter().filter(|&&t| !t).count().max(1) as f64;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0.0, 0.0);
    for (n, &i) in order.iter().enumerate() {
        if truth[i] {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        let last_of_tie = order.get(n + 1).is_none_or(|&next| scores[next] != scores[i]);
        if last_of_tie {
            points.push((fp / neg, tp / pos));
        }
    }
    points
}
