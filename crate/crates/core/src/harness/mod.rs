//! Datasets, experiment runners, and metrics output.

mod data;
mod idx;
mod metrics;
mod ntk;
mod sweep;
mod train;

pub use data::{synthetic_classification, ClassificationData, SyntheticSpec};
pub use idx::{load_idx, load_idx_dataset, write_idx, IdxKind, IdxTensor};
pub use metrics::{MetricsSink, METRICS_HEADER};
pub use ntk::{contraction_fraction, lambda_min_g0, run_ntk_experiment, setup_ntk, NtkConfig, NtkCurvature, NtkProblem, NtkRun};
pub use sweep::{oracle_error_sweep, summarize_sweep, write_sweep_csv, SweepConfig, SweepRow, SweepSummary};
pub use train::{
    accuracy, build_mlp, run_training, DatasetSource, OptimizerKind, RunConfig, RunSummary,
};
