//! Experiment plans, the online run protocol and the results store.

mod plan;
mod runner;
mod store;

pub use plan::{
    ArchitectureSpec, DatasetSpec, ExperimentPlan, FileFormat, MetricSettings, ModelSpec, ReferenceSpec, RunUnit,
    PLAN_VERSION,
};
pub use runner::{adapt_stream, run_grid, GridOutcome, Prepared, RepeatData, RunOptions, StreamOutcome};
pub use store::{encode_log, log_digest, resolve, Baseline, LogRow, ResultsStore, RunRecord, RunSummary};
