//! Experiment runner behind the `cycda` binary. Each subcommand reads a
//! TOML config and writes its outputs below the configured directory.
//!
//! Exit codes are 0 on success, 1 for invalid arguments, configs or inputs,
//! and 2 for failures while running.

mod commands;
mod config;
mod error;
mod records;

pub use commands::{
    cmd_ablate, cmd_evaluate, cmd_generate, cmd_train, load_spec, run_case, AblationTable, Checkpoint, Overrides,
    SeedRun, TrainLayout, Variant,
};
pub use config::{check_dims, ExperimentConfig};
pub use error::CliError;
pub use records::{gnuplot_curves, read_metrics, summary_table, MetricsRecord, MetricsWriter, SummaryRow, SUMMARY_METRICS};
