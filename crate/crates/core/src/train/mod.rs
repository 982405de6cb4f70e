//! Cross-entropy training with Adam, early stopping and layer freezing,
//! plus evaluation metrics and report export.

mod metrics;
mod optim;
mod trainer;

pub use metrics::{
    classification_report, export_report, read_report_json, render_report_json,
    render_report_text, ClassMetrics, ConfusionMatrix, EvalReport, Ratio, ReportFormat,
};
pub use optim::{adam_step, cross_entropy, AdamState, PROB_FLOOR};
pub use trainer::{
    evaluate, score_split, train, EpochRecord, SplitScore, TrainConfig, TrainLog,
};
