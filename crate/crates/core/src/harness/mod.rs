//! Experiment orchestration: configs, benchmarks, property verification and
//! plot data.

mod benchmark;
mod config;
mod plot;
mod stats;
mod verify;

pub use benchmark::{
    read_report, run_benchmark, score_references, write_report, AbortLog, AggregateReport, BenchmarkOptions,
    CellResult, Degradation, GroupSummary, RobustnessCheck, ScoreReferences,
};
pub use config::{ExperimentConfig, FlatConfig, RunConfig};
pub use plot::{emit_plot_data, PlotKind};
pub use stats::{bootstrap_ci, iqm, mean, median, normalized_score, Statistic};
pub use verify::*;
