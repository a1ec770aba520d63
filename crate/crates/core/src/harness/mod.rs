//! Training loop, diagnostics, and experiment orchestration.

mod config;
mod record;
mod suite;
mod train;

pub use config::{DatasetKind, TrainConfig, CONFIG_KEYS};
pub use record::{
    weight_distribution_summary, MetricRow, OpCounts, RunRecord, RunStatus, TaskWeightSummary, TaylorRow, WeightRow,
};
pub use suite::{grid_search, mean_std, run_seeds, run_suite, Grid, GridResult, SuiteRow, SuiteSummary};
pub use train::{build_dataset, taylor_deltas, taylor_residual, train, train_on};

/// Formats a number with 9 significant digits.
pub fn fmt9(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.8e}")
    } else {
        v.to_string()
    }
}
