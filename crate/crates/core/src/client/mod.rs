//! User-facing API: sessions, pilot and task managers, and handles.
//!
//! ```no_run
//! use pilotkit::client::{PilotManager, Session, TaskManager};
//! use pilotkit::config::SessionConfig;
//! use pilotkit::pilot::PilotDescription;
//! use pilotkit::task::TaskDescription;
//!
//! let session = Session::create("/tmp/runs", SessionConfig::default()).unwrap();
//! let pmgr = PilotManager::new(&session);
//! let pilot = pmgr.submit_pilot(PilotDescription::simulated("p0", 4, 8, 0)).unwrap();
//! let tmgr = TaskManager::new(&session);
//! tmgr.add_pilot(&pilot);
//! let tds = (0..64).map(|i| {
//!     TaskDescription::executable(format!("t{i}"), "pilotkit-emulate").with_args(["--duration", "2"])
//! });
//! let handles: Vec<_> = tmgr.submit_tasks(tds.collect()).into_iter().flatten().collect();
//! tmgr.wait_tasks(&handles, None).unwrap();
//! session.close();
//! ```

mod registry;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use thiserror::Error;

pub use registry::TaskInfo;
use registry::{Registry, Tables};

use crate::agent::{bootstrap_agent, AgentConfig, AgentContext, AgentHandle};
use crate::bus::{Bus, Channel, ChannelKind};
use crate::config::SessionConfig;
use crate::executor::TERM_GRACE;
use crate::pilot::{Fabric, PilotDescription};
use crate::protocol::{self, Control, Notice, PilotState};
use crate::task::{validate_task_description, Task, TaskDescription, TaskState};
use crate::time::{Clock, Micros};
use crate::tracer::{names, ClockKind, Manifest, TraceSink, Tracer, TRACE_DIR};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClientError {
    #[error("work directory {path} is not writable: {reason}")]
    WorkdirUnwritable { path: String, reason: String },
    #[error("invalid pilot: {0}")]
    InvalidPilot(String),
    #[error("fabric unavailable: {0}")]
    FabricUnavailable(String),
    #[error("session is closed")]
    Closed,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SubmitError {
    #[error("task {uid} rejected: {reason}")]
    Invalid { uid: String, reason: String },
    #[error("task {0} was already submitted")]
    Duplicate(String),
    #[error("no pilot to run task {0}")]
    NoPilot(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WaitError {
    #[error("timed out with {} task(s) still running", pending.len())]
    Timeout {
        pending: Vec<String>,
        snapshot: Vec<TaskInfo>,
    },
}

struct PilotRecord {
    pd: PilotDescription,
    queue: Channel,
    control: Channel,
    agent: Option<AgentHandle>,
}

struct Inner {
    uid: String,
    dir: PathBuf,
    cfg: SessionConfig,
    bus: Arc<Bus>,
    sink: Arc<TraceSink>,
    notify: Channel,
    clock: Mutex<Option<Clock>>,
    created: Instant,
    registry: Arc<Registry>,
    pilots: Mutex<Vec<PilotRecord>>,
    tracer: Mutex<Tracer>,
    listener: Mutex<Option<JoinHandle<()>>>,
    closed: Mutex<bool>,
    drive_seq: AtomicU64,
}

/// Owns the bus, the trace sink and every pilot started through it.
/// Closing (or dropping) the session cancels remaining tasks and
/// finalizes all pilots.
#[derive(Clone)]
pub struct Session {
    inner: Arc<Inner>,
}

fn session_uid() -> String {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S");
    format!("pk.{stamp}.{:06x}", rand::random::<u32>() & 0xff_ffff)
}

impl Session {
    /// Creates `<root>/<uid>/` with a config snapshot and starts the
    /// notification listener.
    pub fn create(root: impl AsRef<Path>, cfg: SessionConfig) -> Result<Session, ClientError> {
        let uid = session_uid();
        let dir = root.as_ref().join(&uid);
        let unwritable = |e: std::io::Error| ClientError::WorkdirUnwritable {
            path: dir.display().to_string(),
            reason: e.to_string(),
        };
        std::fs::create_dir_all(&dir).map_err(unwritable)?;
        let snapshot = serde_json::to_string_pretty(&cfg).expect("config serializes");
        std::fs::write(dir.join("config.json"), snapshot).map_err(unwritable)?;
        let sink = if cfg.tracing {
            let tdir = dir.join(TRACE_DIR);
            std::fs::create_dir_all(&tdir).map_err(unwritable)?;
            TraceSink::new(tdir, cfg.trace_buffer)
        } else {
            TraceSink::disabled()
        };
        let bus = Arc::new(Bus::default());
        let notify = bus
            .open_channel(protocol::NOTIFY_CHANNEL, ChannelKind::Topic, cfg.transport.clone())
            .map_err(|e| ClientError::FabricUnavailable(e.to_string()))?;
        let mut rx = notify.receiver().map_err(|e| ClientError::FabricUnavailable(e.to_string()))?;
        let registry = Arc::new(Registry::default());
        let reg = Arc::clone(&registry);
        let listener = std::thread::Builder::new()
            .name("session.notify".into())
            .spawn(move || loop {
                match rx.recv_msgs::<Notice>(4096, Duration::from_millis(100)) {
                    Ok(n) if n.is_empty() => {}
                    Ok(n) => reg.apply(n),
                    Err(_) => break,
                }
            })
            .map_err(|e| ClientError::FabricUnavailable(e.to_string()))?;
        let mut tracer = sink.tracer("client");
        tracer.emit(Micros::ZERO, names::SESSION_START, None, Some(&uid));
        Ok(Session {
            inner: Arc::new(Inner {
                uid,
                dir,
                cfg,
                bus,
                sink,
                notify,
                clock: Mutex::new(None),
                created: Instant::now(),
                registry,
                pilots: Mutex::new(Vec::new()),
                tracer: Mutex::new(tracer),
                listener: Mutex::new(Some(listener)),
                closed: Mutex::new(false),
                drive_seq: AtomicU64::new(0),
            }),
        })
    }

    pub fn uid(&self) -> &str {
        &self.inner.uid
    }

    /// `<root>/<uid>`: sandboxes, traces and the manifest live here.
    pub fn dir(&self) -> &Path {
        &self.inner.dir
    }

    pub fn config(&self) -> &SessionConfig {
        &self.inner.cfg
    }

    pub fn bus(&self) -> &Arc<Bus> {
        &self.inner.bus
    }

    pub fn is_closed(&self) -> bool {
        *self.inner.closed.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Client-side clock: virtual for simulated sessions, wall otherwise.
    /// Fixed by the first pilot.
    fn clock(&self) -> Clock {
        self.inner
            .clock
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .clone()
            .unwrap_or_else(|| Clock::Wall(self.inner.created))
    }

    fn now(&self) -> Micros {
        self.clock().now()
    }

    fn submit_pilot(&self, pd: PilotDescription) -> Result<PilotHandle, ClientError> {
        if self.is_closed() {
            return Err(ClientError::Closed);
        }
        pd.validate().map_err(|e| ClientError::InvalidPilot(e.to_string()))?;
        {
            let mut clock = self.inner.clock.lock().unwrap_or_else(|e| e.into_inner());
            let want_virtual = pd.fabric == Fabric::Simulated;
            match clock.as_ref() {
                Some(c) if c.is_virtual() != want_virtual => {
                    return Err(ClientError::InvalidPilot(
                        "local and simulated pilots cannot share a session".into(),
                    ))
                }
                Some(_) => {}
                None => {
                    *clock = Some(if want_virtual {
                        Clock::virtual_clock()
                    } else {
                        Clock::Wall(self.inner.created)
                    })
                }
            }
        }
        let mut pilots = self.inner.pilots.lock().unwrap_or_else(|e| e.into_inner());
        if pilots.iter().any(|p| p.pd.uid == pd.uid) {
            return Err(ClientError::InvalidPilot(format!("pilot {} already exists", pd.uid)));
        }
        let t = &self.inner.cfg.transport;
        let fabric = |e: crate::bus::BusError| ClientError::FabricUnavailable(e.to_string());
        let queue = self
            .inner
            .bus
            .open_channel(&protocol::task_queue(&pd.uid), ChannelKind::Queue, t.clone())
            .map_err(fabric)?;
        let mut acfg = AgentConfig::new(pd.clone(), self.inner.dir.join(&pd.uid));
        acfg.executor_count = self.inner.cfg.executor_count.max(1);
        acfg.emulator = self.inner.cfg.emulator_path.clone();
        acfg.transport = t.clone();
        acfg.seed = self.inner.cfg.seed;
        if let Some(base) = &self.inner.cfg.staging_base {
            acfg.staging_base = base.clone();
        }
        self.inner.registry.set_pilot(&pd.uid, PilotState::Pending, None);
        let ctx = AgentContext {
            bus: Arc::clone(&self.inner.bus),
            sink: Arc::clone(&self.inner.sink),
            clock: self.clock(),
            notify: Some(self.inner.notify.clone()),
        };
        let agent = bootstrap_agent(acfg, ctx).map_err(|e| {
            self.inner.registry.set_pilot(&pd.uid, PilotState::Failed, Some(e.to_string()));
            match e {
                crate::agent::AgentError::ConfigInvalid(m) => ClientError::InvalidPilot(m),
                crate::agent::AgentError::FabricUnavailable(m) => ClientError::FabricUnavailable(m),
            }
        })?;
        let control = agent.control().clone();
        pilots.push(PilotRecord {
            pd: pd.clone(),
            queue,
            control,
            agent: Some(agent),
        });
        Ok(PilotHandle {
            uid: pd.uid.clone(),
            pd,
            registry: Arc::clone(&self.inner.registry),
        })
    }

    fn pilot_channels(&self, uid: &str) -> Option<(PilotDescription, Channel, Channel)> {
        let pilots = self.inner.pilots.lock().unwrap_or_else(|e| e.into_inner());
        pilots
            .iter()
            .find(|p| p.pd.uid == uid)
            .map(|p| (p.pd.clone(), p.queue.clone(), p.control.clone()))
    }

    /// Asks every simulated pilot in `uids` to run until idle and waits for
    /// the acknowledgements (or the deadline).
    fn drive(&self, uids: &[String], deadline: Option<Instant>) -> bool {
        let seq = self.inner.drive_seq.fetch_add(1, Ordering::Relaxed) + 1;
        let mut sims = Vec::new();
        for uid in uids {
            if let Some((pd, _, control)) = self.pilot_channels(uid) {
                if pd.fabric == Fabric::Simulated && control.send_msg(&Control::Drive { seq }).is_ok() {
                    sims.push(uid.clone());
                }
            }
        }
        if sims.is_empty() {
            return true;
        }
        self.inner.registry.wait_until(deadline, |t| {
            sims.iter().all(|p| {
                t.idle.get(p).is_some_and(|&s| s >= seq)
                    || t.pilots.get(p).is_some_and(|(s, _)| s.is_final())
            })
        })
    }

    fn all_pilot_uids(&self) -> Vec<String> {
        let pilots = self.inner.pilots.lock().unwrap_or_else(|e| e.into_inner());
        pilots.iter().map(|p| p.pd.uid.clone()).collect()
    }

    /// Cancels remaining tasks, finalizes every pilot and writes the
    /// manifest. Calling it again does nothing.
    pub fn close(&self) {
        {
            let mut closed = self.inner.closed.lock().unwrap_or_else(|e| e.into_inner());
            if *closed {
                return;
            }
            *closed = true;
        }
        let uids = self.all_pilot_uids();
        for uid in &uids {
            if let Some((_, _, control)) = self.pilot_channels(uid) {
                let _ = control.send_msg(&Control::CancelAll);
            }
        }
        let deadline = Instant::now() + TERM_GRACE + Duration::from_secs(10);
        self.drive(&uids, Some(deadline));
        self.inner.registry.wait_until(Some(deadline), |t| t.live == 0);
        let agents: Vec<AgentHandle> = {
            let mut pilots = self.inner.pilots.lock().unwrap_or_else(|e| e.into_inner());
            pilots.iter_mut().filter_map(|p| p.agent.take()).collect()
        };
        for a in agents {
            a.shutdown();
        }
        {
            let mut tr = self.inner.tracer.lock().unwrap_or_else(|e| e.into_inner());
            let now = self.now();
            tr.emit(now, names::SESSION_CLOSE, None, Some(&self.inner.uid));
            tr.flush();
        }
        // closing the topic ends the listener once it has drained
        self.inner.notify.close();
        if let Some(h) = self.inner.listener.lock().unwrap_or_else(|e| e.into_inner()).take() {
            let _ = h.join();
        }
        {
            let tr = std::mem::replace(
                &mut *self.inner.tracer.lock().unwrap_or_else(|e| e.into_inner()),
                Tracer::disabled("client"),
            );
            tr.close();
        }
        self.inner.bus.close_all();
        let pilots: Vec<PilotDescription> = self
            .inner
            .pilots
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .iter()
            .map(|p| p.pd.clone())
            .collect();
        let manifest = Manifest {
            session_uid: self.inner.uid.clone(),
            seed: self.inner.cfg.seed,
            clock: if self.clock().is_virtual() {
                ClockKind::Virtual
            } else {
                ClockKind::Wall
            },
            components: self.inner.sink.components(),
            pilots,
            config: serde_json::to_value(&self.inner.cfg).unwrap_or_default(),
        };
        if let Err(e) = manifest.write(&self.inner.dir) {
            log::error!("{}: cannot write manifest: {e}", self.inner.uid);
        }
    }

    /// Current state of a pilot.
    pub fn pilot_state(&self, uid: &str) -> Option<PilotState> {
        self.inner.registry.lock().pilots.get(uid).map(|p| p.0)
    }
}

impl Drop for Inner {
    fn drop(&mut self) {
        let closed = *self.closed.lock().unwrap_or_else(|e| e.into_inner());
        if !closed {
            // best effort: stop agents and flush traces
            let pilots = std::mem::take(&mut *self.pilots.lock().unwrap_or_else(|e| e.into_inner()));
            for p in &pilots {
                let _ = p.control.send_msg(&Control::CancelAll);
            }
            for mut p in pilots {
                if let Some(a) = p.agent.take() {
                    a.shutdown();
                }
            }
            self.notify.close();
            if let Some(h) = self.listener.lock().unwrap_or_else(|e| e.into_inner()).take() {
                let _ = h.join();
            }
            self.bus.close_all();
        }
    }
}

#[derive(Clone)]
pub struct PilotHandle {
    uid: String,
    pd: PilotDescription,
    registry: Arc<Registry>,
}

impl PilotHandle {
    pub fn uid(&self) -> &str {
        &self.uid
    }

    pub fn description(&self) -> &PilotDescription {
        &self.pd
    }

    pub fn state(&self) -> PilotState {
        self.registry
            .lock()
            .pilots
            .get(&self.uid)
            .map(|p| p.0)
            .unwrap_or(PilotState::Pending)
    }

    /// Blocks until the pilot is ACTIVE or final, or `timeout` passes.
    pub fn wait_active(&self, timeout: Duration) -> PilotState {
        let uid = self.uid.clone();
        self.registry.wait_until(Some(Instant::now() + timeout), |t| {
            t.pilots.get(&uid).is_some_and(|p| p.0 != PilotState::Pending)
        });
        self.state()
    }
}

pub struct PilotManager {
    session: Session,
}

impl PilotManager {
    pub fn new(session: &Session) -> Self {
        PilotManager {
            session: session.clone(),
        }
    }

    /// Validates `pd` and starts its agent.
    pub fn submit_pilot(&self, pd: PilotDescription) -> Result<PilotHandle, ClientError> {
        self.session.submit_pilot(pd)
    }

    pub fn submit_pilots(&self, pds: Vec<PilotDescription>) -> Result<Vec<PilotHandle>, ClientError> {
        pds.into_iter().map(|pd| self.submit_pilot(pd)).collect()
    }
}

#[derive(Clone)]
pub struct TaskHandle {
    uid: String,
    registry: Arc<Registry>,
}

impl std::fmt::Debug for TaskHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TaskHandle").field("uid", &self.uid).finish()
    }
}

impl TaskHandle {
    pub fn uid(&self) -> &str {
        &self.uid
    }

    pub fn info(&self) -> TaskInfo {
        self.registry.lock().tasks[&self.uid].clone()
    }

    pub fn state(&self) -> TaskState {
        self.info().state
    }
}

/// Sends tasks to its pilots round-robin over ACTIVE pilots (or PENDING
/// ones while none is active) and tracks their states.
pub struct TaskManager {
    session: Session,
    pilots: Mutex<Vec<PilotHandle>>,
    cursor: AtomicUsize,
    handles: Mutex<Vec<TaskHandle>>,
    reserved: Mutex<HashMap<String, u64>>,
}

impl TaskManager {
    pub fn new(session: &Session) -> Self {
        TaskManager {
            session: session.clone(),
            pilots: Mutex::new(Vec::new()),
            cursor: AtomicUsize::new(0),
            handles: Mutex::new(Vec::new()),
            reserved: Mutex::new(HashMap::new()),
        }
    }

    pub fn session(&self) -> &Session {
        &self.session
    }

    pub fn add_pilot(&self, pilot: &PilotHandle) {
        let mut p = self.pilots.lock().unwrap_or_else(|e| e.into_inner());
        if !p.iter().any(|x| x.uid == pilot.uid) {
            p.push(pilot.clone());
        }
    }

    pub fn pilots(&self) -> Vec<PilotHandle> {
        self.pilots.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    fn candidates(&self) -> Vec<PilotHandle> {
        let pilots = self.pilots();
        let active: Vec<PilotHandle> = pilots.iter().filter(|p| p.state() == PilotState::Active).cloned().collect();
        if !active.is_empty() {
            return active;
        }
        pilots.into_iter().filter(|p| p.state() == PilotState::Pending).collect()
    }

    /// Validates and enqueues `tds` in order. Invalid descriptions are
    /// reported individually and do not stop the batch.
    pub fn submit_tasks(&self, tds: Vec<TaskDescription>) -> Vec<Result<TaskHandle, SubmitError>> {
        let candidates = self.candidates();
        self.submit_on(tds, &candidates)
    }

    /// Submits one task to a specific pilot of this manager.
    pub fn submit_to(&self, pilot: &str, td: TaskDescription) -> Result<TaskHandle, SubmitError> {
        let uid = td.uid.clone();
        let target: Vec<PilotHandle> = self.pilots().into_iter().filter(|p| p.uid == pilot).collect();
        self.submit_on(vec![td], &target)
            .pop()
            .unwrap_or(Err(SubmitError::NoPilot(uid)))
    }

    pub(crate) fn raptor_reserved(&self, pilot: &str) -> u64 {
        self.reserved.lock().unwrap_or_else(|e| e.into_inner()).get(pilot).copied().unwrap_or(0)
    }

    pub(crate) fn reserve_raptor(&self, pilot: &str, cores: u64) {
        *self.reserved.lock().unwrap_or_else(|e| e.into_inner()).entry(pilot.to_string()).or_insert(0) += cores;
    }

    fn submit_on(&self, tds: Vec<TaskDescription>, candidates: &[PilotHandle]) -> Vec<Result<TaskHandle, SubmitError>> {
        let mut out = Vec::with_capacity(tds.len());
        let mut batches: HashMap<String, (Channel, Vec<Task>)> = HashMap::new();
        let mut order: Vec<String> = Vec::new();
        let registry = &self.session.inner.registry;
        let mut tracer = self.session.inner.tracer.lock().unwrap_or_else(|e| e.into_inner());
        for td in tds {
            let uid = td.uid.clone();
            if self.session.is_closed() || candidates.is_empty() {
                out.push(Err(SubmitError::NoPilot(uid)));
                continue;
            }
            let i = self.cursor.fetch_add(1, Ordering::Relaxed) % candidates.len();
            let pilot = &candidates[i];
            if let Err(e) = validate_task_description(&td, &pilot.pd) {
                out.push(Err(SubmitError::Invalid {
                    uid,
                    reason: e.to_string(),
                }));
                continue;
            }
            let info = TaskInfo {
                uid: uid.clone(),
                state: TaskState::Submitted,
                pilot: Some(pilot.uid.clone()),
                exit_code: None,
                reason: None,
                retries: 0,
            };
            if !registry.insert_task(info) {
                out.push(Err(SubmitError::Duplicate(uid)));
                continue;
            }
            let now = self.session.now();
            tracer.emit(now, names::TASK_SUBMIT, Some(&uid), Some(&pilot.uid));
            let mut task = Task::new(td);
            let _ = task.advance(TaskState::Submitted, now, &mut tracer);
            let entry = batches.entry(pilot.uid.clone()).or_insert_with(|| {
                order.push(pilot.uid.clone());
                let (_, q, _) = self.session.pilot_channels(&pilot.uid).expect("pilot belongs to session");
                (q, Vec::new())
            });
            entry.1.push(task);
            let h = TaskHandle {
                uid,
                registry: Arc::clone(registry),
            };
            self.handles.lock().unwrap_or_else(|e| e.into_inner()).push(h.clone());
            out.push(Ok(h));
        }
        drop(tracer);
        for p in order {
            let (q, tasks) = batches.remove(&p).expect("batch per pilot");
            for chunk in tasks.chunks(1024) {
                if let Err(e) = q.send_msgs(chunk) {
                    log::error!("cannot enqueue tasks for {p}: {e}");
                    let notices = chunk
                        .iter()
                        .map(|t| {
                            Notice::Task(protocol::TaskNotice {
                                uid: t.uid().to_string(),
                                pilot: p.clone(),
                                state: TaskState::Failed,
                                ts: self.session.now(),
                                exit_code: None,
                                reason: Some(e.to_string()),
                                retries: 0,
                            })
                        })
                        .collect();
                    registry.apply(notices);
                }
            }
        }
        out
    }

    /// Every handle this manager has issued.
    pub fn handles(&self) -> Vec<TaskHandle> {
        self.handles.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    /// Waits until every handle is terminal. `timeout` of `None` waits
    /// forever; on timeout the error carries the non-terminal uids.
    pub fn wait_tasks(&self, handles: &[TaskHandle], timeout: Option<Duration>) -> Result<Vec<TaskInfo>, WaitError> {
        let deadline = timeout.map(|t| Instant::now() + t);
        let uids: Vec<String> = handles.iter().map(|h| h.uid.clone()).collect();
        let pilots: Vec<String> = self.pilots().iter().map(|p| p.uid.clone()).collect();
        let all_done = |t: &Tables| uids.iter().all(|u| t.tasks.get(u).is_none_or(|i| i.state.is_terminal()));
        loop {
            if self.session.inner.registry.wait_until(Some(Instant::now()), all_done) {
                break;
            }
            if deadline.is_some_and(|d| Instant::now() >= d) {
                return Err(self.timeout(&uids));
            }
            self.session.drive(&pilots, deadline);
            let step = Instant::now() + Duration::from_millis(200);
            let until = deadline.map_or(step, |d| d.min(step));
            if self.session.inner.registry.wait_until(Some(until), all_done) {
                break;
            }
        }
        let t = self.session.inner.registry.lock();
        Ok(uids.iter().filter_map(|u| t.tasks.get(u).cloned()).collect())
    }

    fn timeout(&self, uids: &[String]) -> WaitError {
        let t = self.session.inner.registry.lock();
        let snapshot: Vec<TaskInfo> = uids.iter().filter_map(|u| t.tasks.get(u).cloned()).collect();
        let pending = snapshot
            .iter()
            .filter(|i| !i.state.is_terminal())
            .map(|i| i.uid.clone())
            .collect();
        WaitError::Timeout { pending, snapshot }
    }

    /// Cancels the given tasks on every pilot of this manager.
    pub fn cancel_tasks(&self, uids: &[String]) {
        for p in self.pilots() {
            if let Some((_, _, control)) = self.session.pilot_channels(&p.uid) {
                let _ = control.send_msg(&Control::Cancel { uids: uids.to_vec() });
            }
        }
    }
}
