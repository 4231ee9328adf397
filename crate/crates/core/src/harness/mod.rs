//! Synthetic data, experiment orchestration and report emission.

pub mod dataset;
pub mod experiment;
pub mod io;
pub mod report;

pub use dataset::{class_name, generate_dataset, DatasetSpec, LabeledImages, SyntheticDataset};
pub use experiment::{
    audit_budget, load_deltas, prepare_models, quantize_within, run_pipeline, AttackSpec, EvaluationSpec,
    ExperimentConfig, FailureRecord, Manifest, Method, MetricKind, PairRecord, RunLayout, BUDGET_TOLERANCE,
};
pub use report::{emit_report, metric_value, CosineReport, ReportFiles, RunReport, SCHEMA_VERSION};
