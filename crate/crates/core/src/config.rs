//! Session settings and the workload file read by `pilotkit run`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bus::Transport;
use crate::pilot::PilotDescription;
use crate::task::TaskDescription;
use crate::tracer::DEFAULT_BUFFER;

fn default_true() -> bool {
    true
}

fn default_buffer() -> usize {
    DEFAULT_BUFFER
}

fn default_one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub seed: u64,
    /// `in_process`, or `{"tcp": "127.0.0.1:0"}`.
    pub transport: Transport,
    pub tracing: bool,
    pub trace_buffer: usize,
    /// Program run for tasks named `pilotkit-emulate`. Defaults to the
    /// binary installed next to the running executable.
    pub emulator_path: Option<PathBuf>,
    pub executor_count: u32,
    /// Base for relative client-side staging paths; defaults to the
    /// current directory.
    pub staging_base: Option<PathBuf>,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            seed: 0,
            transport: Transport::InProcess,
            tracing: default_true(),
            trace_buffer: default_buffer(),
            emulator_path: None,
            executor_count: default_one(),
            staging_base: None,
        }
    }
}

impl SessionConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_tracing(mut self, on: bool) -> Self {
        self.tracing = on;
        self
    }

    pub fn with_emulator(mut self, path: impl Into<PathBuf>) -> Self {
        self.emulator_path = Some(path.into());
        self
    }

    pub fn with_transport(mut self, t: Transport) -> Self {
        self.transport = t;
        self
    }
}

/// A pilot plus the tasks to run on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    #[serde(default)]
    pub session: SessionConfig,
    /// One pilot, or several under `pilots`.
    #[serde(default)]
    pub pilot: Option<PilotDescription>,
    #[serde(default)]
    pub pilots: Vec<PilotDescription>,
    pub tasks: Vec<TaskDescription>,
    /// Seconds to wait for the workload; unbounded when absent.
    #[serde(default)]
    pub timeout_s: Option<f64>,
}

impl Workload {
    pub fn from_file(path: &Path) -> anyhow::Result<Workload> {
        let text = std::fs::read_to_string(path)?;
        let w: Workload = serde_json::from_str(&text)?;
        if w.pilot.is_none() && w.pilots.is_empty() {
            anyhow::bail!("{}: no pilot given", path.display());
        }
        Ok(w)
    }

    pub fn all_pilots(&self) -> Vec<PilotDescription> {
        self.pilot.iter().cloned().chain(self.pilots.iter().cloned()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn workload_defaults() {
        let w: Workload = serde_json::from_str(
            r#"{"pilot": {"uid": "p", "fabric": "simulated", "nodes": 2, "cores_per_node": 4},
                "tasks": [{"uid": "t", "kind": "executable", "name": "x"}]}"#,
        )
        .unwrap();
        assert!(w.session.tracing);
        assert_eq!(w.all_pilots().len(), 1);
        assert_eq!(w.tasks[0].cores_per_task, 1);
        let t: SessionConfig = serde_json::from_str(r#"{"transport": {"tcp": "127.0.0.1:0"}}"#).unwrap();
        assert_eq!(t.transport, Transport::Tcp("127.0.0.1:0".into()));
    }
}
