//! Experiment orchestration: configuration, traces, runs and sweeps.

pub mod config;
pub mod experiment;
pub mod trace;

pub use config::{DataSource, ExperimentConfig, Policy, RawConfig};
pub use experiment::{
    compute_accuracy, prepare_data, report, run_experiment, run_once, run_sweep, ExperimentOutput, PreparedData,
    RunResult, Summary, Sweep,
};
pub use trace::{read_trace, read_trace_file, trace_to_string, write_trace, write_trace_file, TraceRecord};
