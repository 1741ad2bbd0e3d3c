//! Master/worker execution of many small function calls on top of
//! ordinary tasks.
//!
//! A master is a function task. Once running it opens its channels and
//! submits its worker tasks to its own pilot. Workers register with the
//! master over `<master>.ctl`, heartbeat there, and receive call batches on
//! `<worker>.work`. The client feeds calls into `<master>.calls` and reads
//! results from `<master>.results`.

mod master;
mod worker;

use std::collections::HashSet;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bus::{Bus, BusError, Channel, ChannelKind, Receiver, Transport};
use crate::client::{SubmitError, TaskHandle, TaskManager};
use crate::pilot::Fabric;
use crate::task::{Task, TaskDescription};
use crate::time::Clock;
use crate::tracer::TraceSink;

pub const MASTER_FUNCTION: &str = "raptor.master";
pub const WORKER_FUNCTION: &str = "raptor.worker";

pub fn is_raptor_function(name: &str) -> bool {
    name == MASTER_FUNCTION || name == WORKER_FUNCTION
}

/// What a function task running inside an agent can reach.
#[derive(Clone)]
pub struct FunctionEnv {
    pub bus: Arc<Bus>,
    pub sink: Arc<TraceSink>,
    pub clock: Clock,
    pub pilot: String,
    pub task_queue: String,
    pub transport: Transport,
    pub seed: u64,
}

/// Entry point for the two framework functions.
pub fn run_function(task: &Task, env: &FunctionEnv, cancel: &AtomicBool) -> Result<Vec<u8>, String> {
    let td = &task.description;
    match td.name.as_str() {
        MASTER_FUNCTION => {
            let cfg: MasterConfig = td
                .arguments
                .first()
                .ok_or("master needs its configuration")
                .and_then(|a| serde_json::from_str(a).map_err(|_| "bad master configuration"))
                .map_err(str::to_string)?;
            master::run(&td.uid, cfg, env, cancel)
        }
        WORKER_FUNCTION => {
            let master = td.arguments.first().ok_or("worker needs its master uid")?.clone();
            let hb = td
                .arguments
                .get(1)
                .and_then(|s| s.parse::<f64>().ok())
                .unwrap_or(0.1);
            worker::run(&td.uid, &master, td.cores_per_task.max(1), hb, env, cancel)
        }
        other => Err(format!("unknown function {other}")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallState {
    Queued,
    Running,
    Done,
    Failed,
}

/// One named built-in invocation. The payload is the UTF-8 argument text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionCall {
    pub call_uid: String,
    pub function_name: String,
    pub payload: Vec<u8>,
    pub result: Option<Vec<u8>>,
    pub state: CallState,
}

impl FunctionCall {
    pub fn new(uid: impl Into<String>, function: impl Into<String>, payload: impl Into<Vec<u8>>) -> Self {
        FunctionCall {
            call_uid: uid.into(),
            function_name: function.into(),
            payload: payload.into(),
            result: None,
            state: CallState::Queued,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallResult {
    pub call_uid: String,
    pub state: CallState,
    /// Result bytes when done, the error message when failed.
    pub output: Vec<u8>,
    pub worker: String,
}

impl CallResult {
    pub fn is_ok(&self) -> bool {
        self.state == CallState::Done
    }
}

fn default_batch() -> u32 {
    1024
}

fn default_prefetch() -> u32 {
    64
}

fn default_heartbeat() -> f64 {
    0.1
}

fn default_timeout() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MasterConfig {
    pub workers_per_master: u32,
    pub cores_per_worker: u32,
    /// Largest number of calls in one message to a worker.
    #[serde(default = "default_batch")]
    pub dispatch_batch: u32,
    /// Calls a worker may hold per core, running or queued.
    #[serde(default = "default_prefetch")]
    pub prefetch_per_core: u32,
    #[serde(default = "default_heartbeat")]
    pub heartbeat_s: f64,
    /// A worker silent for this long is considered lost.
    #[serde(default = "default_timeout")]
    pub worker_timeout_s: f64,
}

impl MasterConfig {
    pub fn new(workers_per_master: u32, cores_per_worker: u32) -> Self {
        MasterConfig {
            workers_per_master,
            cores_per_worker,
            dispatch_batch: default_batch(),
            prefetch_per_core: default_prefetch(),
            heartbeat_s: default_heartbeat(),
            worker_timeout_s: default_timeout(),
        }
    }

    /// Cores a master and all its workers hold.
    pub fn cores(&self) -> u64 {
        1 + u64::from(self.workers_per_master) * u64::from(self.cores_per_worker)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RaptorError {
    #[error("master and workers need {needed} cores, {available} available")]
    CapacityExceeded { needed: u64, available: u64 },
    #[error("invalid master configuration: {0}")]
    Invalid(String),
    #[error("no local pilot to run a master on")]
    NoPilot,
    #[error(transparent)]
    Submit(#[from] SubmitError),
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error("timed out with {0} call(s) outstanding")]
    Timeout(usize),
}

/// Messages from the client to a master.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) enum ToMaster {
    Calls(Vec<FunctionCall>),
    Stop,
}

/// Messages from workers to a master.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) enum FromWorker {
    Register { worker: String, capacity: u32 },
    Heartbeat { worker: String },
    Results { worker: String, results: Vec<CallResult> },
}

/// Messages from a master to one worker.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) enum ToWorker {
    Calls(Vec<FunctionCall>),
    Stop,
}

pub(crate) fn calls_channel(master: &str) -> String {
    format!("{master}.calls")
}

pub(crate) fn results_channel(master: &str) -> String {
    format!("{master}.results")
}

pub(crate) fn ctl_channel(master: &str) -> String {
    format!("{master}.ctl")
}

pub(crate) fn work_channel(worker: &str) -> String {
    format!("{worker}.work")
}

pub fn worker_uid(master: &str, i: u32) -> String {
    format!("{master}.worker.{i:04}")
}

/// Client side of a running master.
pub struct MasterHandle {
    uid: String,
    task: TaskHandle,
    pilot: String,
    cfg: MasterConfig,
    calls: Channel,
    results: Receiver,
}

impl MasterHandle {
    pub fn uid(&self) -> &str {
        &self.uid
    }

    pub fn task(&self) -> &TaskHandle {
        &self.task
    }

    pub fn pilot(&self) -> &str {
        &self.pilot
    }

    pub fn config(&self) -> &MasterConfig {
        &self.cfg
    }

    pub fn worker_uids(&self) -> Vec<String> {
        (0..self.cfg.workers_per_master).map(|i| worker_uid(&self.uid, i)).collect()
    }

    /// Queues calls at the master.
    pub fn submit(&self, calls: Vec<FunctionCall>) -> Result<(), RaptorError> {
        for chunk in calls.chunks(1024) {
            self.calls.send_msg(&ToMaster::Calls(chunk.to_vec()))?;
        }
        Ok(())
    }

    /// Results that arrived so far, up to `max`.
    pub fn collect(&mut self, max: usize, timeout: Duration) -> Result<Vec<CallResult>, RaptorError> {
        let batches: Vec<Vec<CallResult>> = self.results.recv_msgs(max.max(1), timeout)?;
        Ok(batches.into_iter().flatten().collect())
    }

    /// Submits `calls` and streams results back until every call has one.
    /// A second result for a call uid is dropped.
    pub fn dispatch_calls(
        &mut self,
        calls: Vec<FunctionCall>,
        timeout: Option<Duration>,
    ) -> Result<Vec<CallResult>, RaptorError> {
        let mut want: HashSet<String> = calls.iter().map(|c| c.call_uid.clone()).collect();
        let deadline = timeout.map(|t| Instant::now() + t);
        self.submit(calls)?;
        let mut out = Vec::with_capacity(want.len());
        while !want.is_empty() {
            if deadline.is_some_and(|d| Instant::now() >= d) {
                return Err(RaptorError::Timeout(want.len()));
            }
            for r in self.collect(64, Duration::from_millis(50))? {
                if want.remove(&r.call_uid) {
                    out.push(r);
                }
            }
        }
        Ok(out)
    }

    /// Tells the master to finish outstanding calls, stop its workers and
    /// return.
    pub fn stop(&self) -> Result<(), RaptorError> {
        self.calls.send_msg(&ToMaster::Stop)?;
        Ok(())
    }
}

/// Submits a master task on the first local pilot of `tm` with room for
/// the master and all its workers. Cores already promised to earlier
/// masters on that pilot count against it.
pub fn launch_master(tm: &TaskManager, uid: &str, cfg: MasterConfig) -> Result<MasterHandle, RaptorError> {
    if cfg.workers_per_master == 0 || cfg.cores_per_worker == 0 || cfg.dispatch_batch == 0 || cfg.prefetch_per_core == 0 {
        return Err(RaptorError::Invalid("workers, cores, batch and prefetch must be positive".into()));
    }
    let pilots: Vec<_> = tm
        .pilots()
        .into_iter()
        .filter(|p| p.description().fabric == Fabric::Local)
        .collect();
    if pilots.is_empty() {
        return Err(RaptorError::NoPilot);
    }
    let needed = cfg.cores();
    let mut best = 0;
    let mut pilot = None;
    for p in &pilots {
        let reserved = tm.raptor_reserved(p.uid());
        let available = p.description().total_cores().saturating_sub(reserved);
        if available >= needed && cfg.cores_per_worker <= p.description().cores_per_node {
            pilot = Some(p.clone());
            break;
        }
        best = best.max(available);
    }
    let Some(pilot) = pilot else {
        return Err(RaptorError::CapacityExceeded {
            needed,
            available: best,
        });
    };
    let bus = tm.session().bus();
    let transport = tm.session().config().transport.clone();
    let calls = bus.open_channel(&calls_channel(uid), ChannelKind::Queue, transport.clone())?;
    let results = bus
        .open_channel(&results_channel(uid), ChannelKind::Queue, transport.clone())?
        .receiver()?;
    bus.open_channel(&ctl_channel(uid), ChannelKind::Queue, transport)?;
    let args = serde_json::to_string(&cfg).expect("config serializes");
    let td = TaskDescription::function(uid, MASTER_FUNCTION).with_args([args]);
    let handle = tm.submit_to(pilot.uid(), td)?;
    tm.reserve_raptor(pilot.uid(), needed);
    Ok(MasterHandle {
        uid: uid.to_string(),
        task: handle,
        pilot: pilot.uid().to_string(),
        cfg,
        calls,
        results,
    })
}
