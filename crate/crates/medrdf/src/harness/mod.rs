//! Experiment harness: datasets, orchestration, and reports.

pub mod config;
pub mod dataset;
pub mod eval;
pub mod report;

pub use config::{DatasetConfig, EvalConfig, ExperimentConfig};
pub use dataset::{load_dataset, Dataset, DatasetSource, Split, SyntheticSpec};
pub use eval::Experiment;
pub use report::{emit_report, parse_csv, ReportCell, ReportTable};
