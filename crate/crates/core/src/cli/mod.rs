//! Command implementations behind the `advdepth` binary.

pub mod colormap;
mod commands;
pub mod config;
pub mod plot;

pub use commands::{
    cmd_adapt, cmd_eval, cmd_synth, cmd_sweep, cmd_train, plot_run, point_seed, random_crops, sweep_csv_header,
    sweep_point, AdaptReport, SweepRow, TrainSummary, ADAPT_REPORT, METRICS_CSV, METRICS_JSON, SEMI_MODE, SWEEP_CSV,
};
pub use config::{ExperimentConfig, GridValue, SweepKind, OUTPUT_ROOT_ENV, RESOLVED_CONFIG};

use crate::error::{Error, ErrorCategory};

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_RUNTIME: u8 = 4;

pub fn exit_code(err: &Error) -> u8 {
    match err.category() {
        ErrorCategory::Config => EXIT_CONFIG,
        ErrorCategory::Data => EXIT_DATA,
        ErrorCategory::Runtime => EXIT_RUNTIME,
    }
}
