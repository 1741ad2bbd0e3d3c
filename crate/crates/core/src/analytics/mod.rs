//! Post-mortem metrics over the trace files of a closed session.
//!
//! Everything here is a pure function of a loaded [`Trace`]. Time arithmetic
//! stays in integer microseconds so the utilization breakdown partitions
//! core-time with no residual.

mod metrics;
mod replay;
mod report;
mod timeline;
mod trace;

use std::path::PathBuf;

use thiserror::Error;

pub use metrics::{
    compute_ttx, compute_utilization, concurrency_and_rate_series, latency_stats, utilization_timeline, Category,
    LatencyStats, SeriesSource, StackedSeries, TimeSeries, UtilizationReport, CATEGORIES,
};
pub use replay::{replay_placements, ReplayReport};
pub use report::{emit_report, PlotFormat, ReportFiles};
pub use timeline::{task_timelines, Attempt, TaskTimeline};
pub use trace::{load_session_traces, CorruptLine, Trace};

#[derive(Debug, Error)]
pub enum AnalyticsError {
    #[error("no manifest in {0}")]
    ManifestMissing(PathBuf),
    #[error("cannot read {path}: {reason}")]
    Io { path: PathBuf, reason: String },
    #[error("trace holds no terminal task")]
    NoTasks,
    #[error("incomplete trace: {}", .0.join("; "))]
    IncompleteTrace(Vec<String>),
    #[error("pilot {0} is not in the manifest")]
    UnknownPilot(String),
    #[error("cannot write {path}: {reason}")]
    UnwritableOutput { path: PathBuf, reason: String },
}
