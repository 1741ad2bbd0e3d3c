//! A pilot-style runtime for heterogeneous many-task workloads.

pub mod agent;
pub mod analytics;
pub mod bus;
pub mod client;
pub mod config;
pub mod executor;
pub mod harness;
pub mod pilot;
pub mod protocol;
pub mod raptor;
pub mod scheduler;
pub mod task;
pub mod time;
pub mod tracer;
