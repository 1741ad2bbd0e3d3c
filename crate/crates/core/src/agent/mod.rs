//! The pilot-side runtime: pulls tasks from the pilot's queue, stages
//! data, schedules, launches and collects tasks, then finalizes.
//!
//! Local pilots run a threaded pipeline of stages connected by bus
//! channels. Simulated pilots run a single-threaded discrete-event loop on
//! their own virtual clock and only make progress when driven.

mod local;
mod simulated;
pub mod staging;

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread::JoinHandle;

use thiserror::Error;

use crate::bus::{Bus, BusError, Channel, ChannelKind, Transport};
use crate::pilot::{DvmPolicy, Fabric, PilotDescription};
use crate::protocol;
use crate::time::Clock;
use crate::tracer::TraceSink;

pub use staging::{stage, Direction, StagingError};

#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    pub pilot: PilotDescription,
    pub bulk_size: u32,
    /// Executor threads on local pilots. Simulated pilots run one executor
    /// per DVM instead.
    pub executor_count: u32,
    /// Task sandboxes are `<staging_root>/<task_uid>/`.
    pub staging_root: PathBuf,
    /// Relative client-side staging paths resolve against this.
    pub staging_base: PathBuf,
    pub dvm_policy: DvmPolicy,
    /// Queue the agent pulls from; several pilots may share one.
    pub task_queue: String,
    /// Substitutes for the `pilotkit-emulate` program name on local pilots.
    pub emulator: Option<PathBuf>,
    pub transport: Transport,
    pub seed: u64,
}

impl AgentConfig {
    pub fn new(pilot: PilotDescription, staging_root: impl Into<PathBuf>) -> Self {
        AgentConfig {
            bulk_size: pilot.bulk_size,
            executor_count: 1,
            staging_root: staging_root.into(),
            staging_base: std::env::current_dir().unwrap_or_default(),
            dvm_policy: pilot.dvm_policy,
            task_queue: protocol::task_queue(&pilot.uid),
            emulator: None,
            transport: Transport::InProcess,
            seed: 0,
            pilot,
        }
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        self.pilot.validate().map_err(|e| AgentError::ConfigInvalid(e.to_string()))?;
        if self.bulk_size == 0 {
            return Err(AgentError::ConfigInvalid("bulk_size must be positive".into()));
        }
        if self.executor_count == 0 {
            return Err(AgentError::ConfigInvalid("executor_count must be positive".into()));
        }
        Ok(())
    }
}

/// Shared session services an agent plugs into.
#[derive(Clone)]
pub struct AgentContext {
    pub bus: Arc<Bus>,
    pub sink: Arc<TraceSink>,
    /// Session clock; simulated agents keep their own virtual clock.
    pub clock: Clock,
    pub notify: Option<Channel>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AgentError {
    #[error("fabric unavailable: {0}")]
    FabricUnavailable(String),
    #[error("invalid agent configuration: {0}")]
    ConfigInvalid(String),
}

impl From<BusError> for AgentError {
    fn from(e: BusError) -> Self {
        AgentError::FabricUnavailable(e.to_string())
    }
}

/// Counters reported when an agent finishes.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AgentSummary {
    pub pulled: u64,
    pub done: u64,
    pub failed: u64,
    pub canceled: u64,
}

pub struct AgentHandle {
    pub pilot: String,
    control: Channel,
    join: Option<JoinHandle<AgentSummary>>,
}

impl AgentHandle {
    pub fn control(&self) -> &Channel {
        &self.control
    }

    /// Broadcasts shutdown and waits for the agent to finalize.
    pub fn shutdown(mut self) -> AgentSummary {
        let _ = self.control.send_msg(&protocol::Control::Shutdown);
        self.join_inner()
    }

    fn join_inner(&mut self) -> AgentSummary {
        self.join
            .take()
            .and_then(|j| j.join().ok())
            .unwrap_or_default()
    }
}

impl Drop for AgentHandle {
    fn drop(&mut self) {
        if self.join.is_some() {
            let _ = self.control.send_msg(&protocol::Control::Shutdown);
            self.join_inner();
        }
    }
}

/// Starts the agent for `cfg.pilot`. Control subscriptions exist before
/// this returns, so nothing sent on the control topic afterwards is lost.
pub fn bootstrap_agent(cfg: AgentConfig, ctx: AgentContext) -> Result<AgentHandle, AgentError> {
    cfg.validate()?;
    let queue = ctx
        .bus
        .get(&cfg.task_queue)
        .ok_or_else(|| AgentError::FabricUnavailable(format!("task queue {} is not open", cfg.task_queue)))?;
    if queue.is_closed() {
        return Err(AgentError::FabricUnavailable(format!("task queue {} is closed", cfg.task_queue)));
    }
    if queue.kind() != ChannelKind::Queue {
        return Err(AgentError::ConfigInvalid(format!("{} is not a queue", cfg.task_queue)));
    }
    let control = ctx.bus.open_channel(
        &protocol::control_channel(&cfg.pilot.uid),
        ChannelKind::Topic,
        cfg.transport.clone(),
    )?;
    let pilot = cfg.pilot.uid.clone();
    let join = match cfg.pilot.fabric {
        Fabric::Simulated => simulated::start(cfg, ctx, queue, &control)?,
        Fabric::Local => local::start(cfg, ctx, queue, &control)?,
    };
    Ok(AgentHandle {
        pilot,
        control,
        join: Some(join),
    })
}

pub(crate) fn sandbox_of(root: &Path, uid: &str) -> PathBuf {
    root.join(uid)
}
