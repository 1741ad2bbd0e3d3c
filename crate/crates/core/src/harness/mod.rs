//! Experiment specs, the experiment driver and the task emulator.

pub mod emulator;
mod experiment;

pub use experiment::{
    run_cell, run_experiment, summary_csv, DurationDist, ExperimentError, ExperimentKind, ExperimentReport,
    ExperimentSpec, Range, RaptorSpec, RunResult, SCALE_NOTE,
};
