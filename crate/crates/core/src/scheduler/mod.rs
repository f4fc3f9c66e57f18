//! Experiment orchestration: run configs, pre-training with replay, the
//! upper bound, A→B transitions, forgetting curves and reports.

pub mod config;
pub mod curve;
pub mod data;
pub mod report;
pub mod run;

pub use curve::{run_forgetting_curve, Curve, CurveOutcome};
pub use config::{ConfigError, CurveSettings, RunConfig, Strategy};
pub use data::Dataset;
pub use run::{
    cap_pairs, cost_report, eval_items, item_windows, read_ledger, run_experiment, run_pretraining, run_upper_bound,
    train_on_windows, CostReport, RunDir, RunLedger, RunResult, Trainer,
};
