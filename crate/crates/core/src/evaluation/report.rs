use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{overall_accuracy, per_class_accuracy, precision_recall_f1, roc_auc, Averaging, PredictionSet};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::training::encode_batched;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    /// Positive class for binary tasks.
    pub positive_class: usize,
    /// Inference chunk size.
    pub batch_size: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self { positive_class: 1, batch_size: 64 }
    }
}

/// All percentages lie in `[0, 100]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub class_names: Vec<String>,
    pub sample_count: usize,
    pub per_class_accuracy: BTreeMap<String, f64>,
    /// Unweighted mean of the per-class accuracies.
    pub average_accuracy: f64,
    /// Fraction of all samples classified correctly.
    pub overall_accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `binary` (positive class) or `macro`.
    pub averaging: String,
    /// Binary tasks only.
    pub roc_auc: Option<f64>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

impl MetricsReport {
    pub fn is_binary(&self) -> bool {
        self.class_names.len() == 2
    }

    /// Class-average accuracy for multiclass tasks, overall accuracy for
    /// binary ones.
    pub fn headline(&self) -> f64 {
        if self.is_binary() {
            self.overall_accuracy
        } else {
            self.average_accuracy
        }
    }

    pub fn from_predictions(preds: &PredictionSet, class_names: &[String], task: &TaskConfig) -> Result<Self> {
        let k = preds.class_count();
        if class_names.len() != k {
            return Err(Error::config(format!("{} class names for {k} score columns", class_names.len())));
        }
        let acc = per_class_accuracy(preds);
        let binary = k == 2;
        let averaging = if binary {
            Averaging::Binary { positive: task.positive_class }
        } else {
            Averaging::Macro
        };
        let prf = precision_recall_f1(preds, averaging)?;
        let roc = if binary {
            let scores: Vec<f64> = preds.scores().column(task.positive_class).to_vec();
            let truth: Vec<bool> = preds.truth().iter().map(|&t| t == task.positive_class).collect();
            Some(roc_auc(&scores, &truth)?)
        } else {
            None
        };
        Ok(Self {
            class_names: class_names.to_vec(),
            sample_count: preds.len(),
            per_class_accuracy: acc.per_class.iter().map(|(&c, &v)| (class_names[c].clone(), v)).collect(),
            average_accuracy: acc.average,
            overall_accuracy: overall_accuracy(preds),
            precision: prf.precision,
            recall: prf.recall,
            f1: prf.f1,
            averaging: if binary { "binary".into() } else { "macro".into() },
            roc_auc: roc,
            metadata: serde_json::Value::Null,
        })
    }

    /// `metric,value` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (name, v) in &self.per_class_accuracy {
            let _ = writeln!(out, "accuracy[{}],{v:.4}", csv_field(name));
        }
        let mut row = |k: &str, v: f64| {
            let _ = writeln!(out, "{k},{v:.4}");
        };
        row("average_accuracy", self.average_accuracy);
        row("overall_accuracy", self.overall_accuracy);
        row("precision", self.precision);
        row("recall", self.recall);
        row("f1", self.f1);
        if let Some(auc) = self.roc_auc {
            row("roc_auc", auc);
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(self)? + "\n")?;
        fs::write(dir.join("metrics.csv"), self.to_csv())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Class probabilities for every sample in inference mode.
pub fn predict(bundle: &ModelBundle, data: &Dataset, task: &TaskConfig) -> Result<PredictionSet> {
    let features = encode_batched(bundle, &data.samples, task.batch_size)?;
    PredictionSet::from_logits(&bundle.classify(&features)?, data.labels()?)
}

pub fn evaluate(bundle: &ModelBundle, data: &Dataset, task: &TaskConfig) -> Result<MetricsReport> {
    match bundle.config.class_count.filter(|_| bundle.classifier.is_some()) {
        None => return Err(Error::config("model has no classifier head to evaluate")),
        Some(k) if k != data.class_count() => {
            return Err(Error::config(format!(
                "model predicts {k} classes, evaluation data has {}",
                data.class_count()
            )))
        }
        Some(_) => {}
    }
    if data.is_empty() {
        return Err(Error::config("evaluation dataset is empty"));
    }
    MetricsReport::from_predictions(&predict(bundle, data, task)?, &data.class_names, task)
}

/// Formats a value with its signed difference from a baseline, in points:
/// `92.19 (+5.90)`.
pub fn format_delta(value: f64, baseline: f64) -> String {
    let delta = (value - baseline) * 100.0;
    let delta = delta.round() / 100.0;
    let delta = if delta == 0.0 { 0.0 } else { delta };
    format!("{value:.2} ({delta:+.2})")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub name: String,
    /// Values for the table's extra columns, e.g. objective checkmarks.
    pub tags: Vec<String>,
    pub report: Option<MetricsReport>,
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub headline: String,
    pub tag_columns: Vec<String>,
    pub baseline: Option<String>,
    pub rows: Vec<ComparisonRow>,
}

/// One named entry for [`compare_runs`].
#[derive(Debug, Clone)]
pub struct RunEntry {
    pub name: String,
    pub tags: Vec<String>,
    /// `None` for runs that produced no evaluation.
    pub report: Option<MetricsReport>,
}

impl RunEntry {
    pub fn new(name: impl Into<String>, report: MetricsReport) -> Self {
        Self { name: name.into(), tags: Vec::new(), report: Some(report) }
    }
}

/// Rows sorted by headline metric, descending; runs without a report go
/// last. Deltas are arithmetic differences from the baseline in points.
pub fn compare_runs(runs: &[RunEntry], tag_columns: &[&str], baseline: Option<&str>) -> Result<ComparisonTable> {
    let base = match baseline {
        Some(name) => {
            let entry = runs
                .iter()
                .find(|r| r.name == name)
                .ok_or_else(|| Error::config(format!("baseline run {name:?} is not among the compared runs")))?;
            let report = entry
                .report
                .as_ref()
                .ok_or_else(|| Error::config(format!("baseline run {name:?} has no metrics")))?;
            Some(report.headline())
        }
        None => None,
    };
    let binary: Vec<bool> = runs.iter().filter_map(|r| r.report.as_ref()).map(MetricsReport::is_binary).collect();
    if binary.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::config("compared runs mix binary and multiclass tasks"));
    }
    let mut rows: Vec<ComparisonRow> = runs
        .iter()
        .map(|r| {
            let mut tags = r.tags.clone();
            tags.resize(tag_columns.len(), String::new());
            ComparisonRow {
                name: r.name.clone(),
                tags,
                report: r.report.clone(),
                delta: base.zip(r.report.as_ref()).map(|(b, rep)| rep.headline() - b),
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        let key = |r: &ComparisonRow| r.report.as_ref().map_or(f64::NEG_INFINITY, MetricsReport::headline);
        key(b).total_cmp(&key(a))
    });
    Ok(ComparisonTable {
        headline: if binary.first() == Some(&true) { "accuracy".into() } else { "average_accuracy".into() },
        tag_columns: tag_columns.iter().map(|s| s.to_string()).collect(),
        baseline: baseline.map(str::to_string),
        rows,
    })
}

impl ComparisonTable {
    fn header(&self) -> Vec<String> {
        let mut h = vec!["run".to_string()];
        h.extend(self.tag_columns.iter().cloned());
        h.push(self.headline.clone());
        for c in ["overall_accuracy", "precision", "recall", "f1", "roc_auc"] {
            h.push(c.into());
        }
        h
    }

    fn cells(&self, row: &ComparisonRow) -> Vec<String> {
        let mut cells = vec![row.name.clone()];
        cells.extend(row.tags.iter().cloned());
        match &row.report {
            Some(r) => {
                let base = self.baseline.as_ref().and(row.delta.map(|d| r.headline() - d));
                cells.push(match base {
                    Some(b) => format_delta(r.headline(), b),
                    None => format!("{:.2}", r.headline()),
                });
                for v in [Some(r.overall_accuracy), Some(r.precision), Some(r.recall), Some(r.f1), r.roc_auc] {
                    cells.push(v.map_or(String::new(), |v| format!("{v:.2}")));
                }
            }
            None => cells.extend(std::iter::repeat_n(String::new(), 6)),
        }
        cells
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for line in std::iter::once(self.header()).chain(self.rows.iter().map(|r| self.cells(r))) {
            let fields: Vec<String> = line.iter().map(|c| csv_field(c)).collect();
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }

    /// Column-aligned plain text.
    pub fn to_text(&self) -> String {
        let lines: Vec<Vec<String>> = std::iter::once(self.header()).chain(self.rows.iter().map(|r| self.cells(r))).collect();
        let widths: Vec<usize> = (0..lines[0].len())
            .map(|i| lines.iter().map(|l| l[i].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (n, line) in lines.iter().enumerate() {
            let padded: Vec<String> = line
                .iter()
                .zip(&widths)
                .map(|(c, &w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
                .collect();
            out.push_str(padded.join("  ").trim_end());
            out.push('\n');
            if n == 0 {
                let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
                out.push_str(&rule.join("  "));
                out.push('\n');
            }
        }
        out
    }
}
