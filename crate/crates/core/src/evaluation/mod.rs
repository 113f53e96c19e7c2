//! Classification metrics, reports and run comparisons.

mod metrics;
mod plot;
mod report;

pub use metrics::{
    argmax, overall_accuracy, per_class_accuracy, precision_recall_f1, prf_from_counts, roc_auc, roc_curve, Averaging,
    ClassAccuracy, PrecisionRecall, PredictionSet,
};
pub use plot::{line_plot, loss_curve_png, roc_curve_png};
pub use report::{
    compare_runs, evaluate, format_delta, predict, ComparisonRow, ComparisonTable, MetricsReport, RunEntry, TaskConfig,
};
