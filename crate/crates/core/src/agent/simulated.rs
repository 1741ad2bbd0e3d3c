//! Discrete-event agent for simulated pilots.
//!
//! Everything runs on one thread over a private virtual clock. Work only
//! happens inside a drive: the agent pulls whatever is queued, then pops
//! events in (time, sequence) order until no task is in flight. Events
//! carry the attempt number of their task so that anything scheduled
//! before a requeue or cancel is ignored.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashSet};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{sandbox_of, stage, AgentConfig, AgentContext, AgentError, AgentSummary, Direction};
use crate::bus::{Channel, Receiver};
use crate::executor::{derive_seed, functions, partition_dvms, Dvm, DvmSelector, DvmState, LatencySampler, EMULATOR_ALIASES};
use crate::harness::emulator::EmulatorArgs;
use crate::pilot::{build_node_list, DvmPolicy};
use crate::protocol::{Control, Notice, Notifier, PilotState};
use crate::scheduler::{Admission, Placement, Scheduler, SlotMap};
use crate::task::{validate_task_description, Task, TaskKind, TaskState, ValidatedDescription};
use crate::time::{Clock, Micros};
use crate::tracer::{names, Tracer};

pub(super) fn start(
    cfg: AgentConfig,
    ctx: AgentContext,
    queue: Channel,
    control: &Channel,
) -> Result<JoinHandle<AgentSummary>, AgentError> {
    let tasks_rx = queue.receiver()?;
    let control_rx = control.receiver()?;
    let name = format!("{}.agent", cfg.pilot.uid);
    thread::Builder::new()
        .name(name)
        .spawn(move || SimAgent::new(cfg, ctx).run(tasks_rx, control_rx))
        .map_err(|e| AgentError::FabricUnavailable(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum Ev {
    Launch { uid: String, attempt: u32 },
    ExecDone { uid: String, attempt: u32 },
    SpawnReturn { uid: String, attempt: u32 },
    DvmFail(u32),
    Walltime,
}

impl Ev {
    fn is_work(&self) -> bool {
        !matches!(self, Ev::DvmFail(_) | Ev::Walltime)
    }
}

struct SimTask {
    task: Task,
    td: Option<ValidatedDescription>,
    attempt: u32,
    duration: Micros,
    exit_code: i32,
}

struct Tracers {
    agent: Tracer,
    bridge: Tracer,
    stager_in: Tracer,
    scheduler: Tracer,
    executors: Vec<Tracer>,
    stager_out: Tracer,
}

struct SimAgent {
    cfg: AgentConfig,
    clock: Clock,
    tr: Tracers,
    notifier: Notifier,
    sched: Scheduler<String>,
    dvms: Vec<Dvm>,
    selector: DvmSelector,
    sampler: LatencySampler,
    dur_rng: ChaCha8Rng,
    tasks: BTreeMap<String, SimTask>,
    heap: BinaryHeap<Reverse<(Micros, u64, Ev)>>,
    seq: u64,
    active: usize,
    canceled: HashSet<String>,
    cancel_all: bool,
    summary: AgentSummary,
}

impl SimAgent {
    fn new(cfg: AgentConfig, ctx: AgentContext) -> Self {
        let pd = &cfg.pilot;
        let uid = pd.uid.clone();
        let node_list = build_node_list(pd);
        let dvms = partition_dvms(&node_list, pd.dvm_max_nodes, pd.launcher_latency_model);
        let scopes = dvms.iter().map(|d| d.node_indices.clone()).collect();
        let honor_tags = cfg.dvm_policy == DvmPolicy::RoundRobin;
        let sched = Scheduler::new(SlotMap::from_node_list(node_list, pd.cores_per_node, pd.gpus_per_node), scopes, honor_tags, true);
        let tr = Tracers {
            agent: ctx.sink.tracer(format!("{uid}.agent")),
            bridge: ctx.sink.tracer(format!("{uid}.bridge")),
            stager_in: ctx.sink.tracer(format!("{uid}.stager_in")),
            scheduler: ctx.sink.tracer(format!("{uid}.scheduler")),
            executors: dvms.iter().map(|d| ctx.sink.tracer(format!("{uid}.executor.{}", d.id))).collect(),
            stager_out: ctx.sink.tracer(format!("{uid}.stager_out")),
        };
        let sampler = LatencySampler::new(pd.launcher_latency_model, derive_seed(cfg.seed, &format!("{uid}.latency")));
        let dur_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("{uid}.duration")));
        SimAgent {
            notifier: Notifier::new(ctx.notify.clone(), uid),
            clock: Clock::virtual_clock(),
            tr,
            sched,
            dvms,
            selector: DvmSelector::new(),
            sampler,
            dur_rng,
            tasks: BTreeMap::new(),
            heap: BinaryHeap::new(),
            seq: 0,
            active: 0,
            canceled: HashSet::new(),
            cancel_all: false,
            summary: AgentSummary::default(),
            cfg,
        }
    }

    fn push(&mut self, t: Micros, ev: Ev) {
        self.seq += 1;
        self.heap.push(Reverse((t, self.seq, ev)));
    }

    fn run(mut self, mut tasks_rx: Receiver, mut control_rx: Receiver) -> AgentSummary {
        self.bootstrap();
        loop {
            let msgs = match control_rx.recv_msgs::<Control>(64, Duration::from_millis(50)) {
                Ok(m) => m,
                Err(_) => break,
            };
            for m in msgs {
                match m {
                    Control::Drive { seq } => {
                        self.pull(&mut tasks_rx);
                        self.process();
                        self.notifier.flush();
                        let pilot = self.cfg.pilot.uid.clone();
                        self.notifier.push(Notice::Idle { pilot, seq });
                    }
                    Control::Cancel { uids } => self.cancel(uids),
                    Control::CancelAll => {
                        self.cancel_all = true;
                        self.pull(&mut tasks_rx);
                        let uids = self.live_uids();
                        self.cancel(uids);
                    }
                    Control::Shutdown => {
                        self.notifier.flush();
                        return self.finalize();
                    }
                }
                self.notifier.flush();
            }
        }
        self.finalize()
    }

    fn bootstrap(&mut self) {
        let model = self.cfg.pilot.launcher_latency_model;
        let t0 = self.clock.now();
        self.tr.agent.emit(t0, names::PILOT_START, None, None);
        let ready = t0 + Micros::from_secs_f64(model.bootstrap_s);
        self.clock.advance_to(ready);
        for d in &mut self.dvms {
            d.state = DvmState::Ready;
            self.tr.agent.emit(ready, names::DVM_READY, None, Some(&d.id.to_string()));
        }
        self.tr.agent.emit(ready, names::AGENT_READY, None, None);
        for f in self.cfg.pilot.dvm_failures.clone() {
            self.push(t0 + Micros::from_secs_f64(f.at_s), Ev::DvmFail(f.dvm));
        }
        let wall = t0 + Micros::from_secs_f64(self.cfg.pilot.walltime_s);
        self.push(wall, Ev::Walltime);
        let pilot = self.cfg.pilot.uid.clone();
        self.notifier.push(Notice::Pilot {
            pilot,
            state: PilotState::Active,
            reason: None,
        });
        self.notifier.flush();
    }

    fn live_uids(&self) -> Vec<String> {
        self.tasks
            .iter()
            .filter(|(_, t)| !t.task.state.is_terminal())
            .map(|(u, _)| u.clone())
            .collect()
    }

    fn pull(&mut self, rx: &mut Receiver) {
        let bulk = self.cfg.bulk_size as usize;
        loop {
            let batch: Vec<Task> = match rx.recv_msgs(bulk, Duration::ZERO) {
                Ok(b) => b,
                Err(_) => return,
            };
            if batch.is_empty() {
                return;
            }
            for task in batch {
                self.admit(task);
            }
        }
    }

    fn finish(&mut self, uid: &str, state: TaskState, reason: Option<String>, tracer: Which) {
        let now = self.clock.now();
        let Some(st) = self.tasks.get_mut(uid) else { return };
        if st.task.state.is_terminal() {
            return;
        }
        st.task.reason = reason.or(st.task.reason.take());
        st.attempt += 1;
        let tr = match tracer {
            Which::Bridge => &mut self.tr.bridge,
            Which::Scheduler => &mut self.tr.scheduler,
            Which::StagerIn => &mut self.tr.stager_in,
            Which::StagerOut => &mut self.tr.stager_out,
        };
        if st.task.advance(state, now, tr).is_ok() {
            self.notifier.task(&st.task, now);
            self.active -= 1;
            match state {
                TaskState::Done => self.summary.done += 1,
                TaskState::Failed => self.summary.failed += 1,
                _ => self.summary.canceled += 1,
            }
        }
    }

    fn admit(&mut self, mut task: Task) {
        let now = self.clock.now();
        let uid = task.description.uid.clone();
        if self.tasks.contains_key(&uid) {
            log::warn!("{}: duplicate task {uid} ignored", self.cfg.pilot.uid);
            return;
        }
        self.summary.pulled += 1;
        self.tr.bridge.emit(now, names::DB_BRIDGE_PULL, Some(&uid), Some(&task.description.shape()));
        task.pilot = Some(self.cfg.pilot.uid.clone());
        if task.state == TaskState::New {
            task.state = TaskState::Submitted;
        }
        let _ = task.advance(TaskState::AgentPulled, now, &mut self.tr.bridge);
        self.notifier.task(&task, now);
        let profile = self.profile(&task);
        self.active += 1;
        let (duration, exit_code) = profile.clone().unwrap_or((Micros::ZERO, 0));
        self.tasks.insert(
            uid.clone(),
            SimTask {
                task,
                td: None,
                attempt: 0,
                duration,
                exit_code,
            },
        );
        if self.cancel_all || self.canceled.remove(&uid) {
            self.finish(&uid, TaskState::Canceled, Some("canceled".into()), Which::Bridge);
            return;
        }
        if let Err(reason) = profile {
            self.finish(&uid, TaskState::Failed, Some(reason), Which::Bridge);
            return;
        }
        if !self.stage_in(&uid) {
            return;
        }
        let desc = &self.tasks[&uid].task.description;
        match validate_task_description(desc, &self.cfg.pilot) {
            Ok(td) => self.submit(&uid, td),
            Err(e) => self.finish(&uid, TaskState::Failed, Some(e.to_string()), Which::Scheduler),
        }
    }

    /// Duration and exit code the task will have.
    fn profile(&mut self, task: &Task) -> Result<(Micros, i32), String> {
        let td = &task.description;
        match td.kind {
            TaskKind::Executable => match EmulatorArgs::from_args(&td.arguments) {
                Ok(args) => Ok((Micros::from_secs_f64(args.sample(&mut self.dur_rng)), args.exit_code)),
                Err(e) if EMULATOR_ALIASES.contains(&td.name.as_str()) => Err(e),
                Err(_) => Ok((Micros::ZERO, 0)),
            },
            TaskKind::Function => {
                if !functions::is_builtin(&td.name) {
                    return Err(format!("function {} is not available on the simulated fabric", td.name));
                }
                let secs = match td.name.as_str() {
                    "sleep" | "spin" => td
                        .arguments
                        .first()
                        .and_then(|a| a.trim().parse::<f64>().ok())
                        .filter(|s| s.is_finite() && *s >= 0.0)
                        .ok_or_else(|| format!("{} needs a duration in seconds", td.name))?,
                    _ => 0.0,
                };
                Ok((Micros::from_secs_f64(secs), 0))
            }
        }
    }

    fn stage_in(&mut self, uid: &str) -> bool {
        let now = self.clock.now();
        let st = self.tasks.get_mut(uid).expect("task admitted");
        if st.task.description.stage_in.is_empty() {
            return true;
        }
        self.tr.stager_in.emit(now, names::STAGE_IN_START, Some(uid), None);
        let _ = st.task.advance(TaskState::StagingIn, now, &mut self.tr.stager_in);
        self.notifier.task(&st.task, now);
        let sandbox = sandbox_of(&self.cfg.staging_root, uid);
        let res = stage(&st.task.description.stage_in, Direction::In, &sandbox, &self.cfg.staging_base);
        self.tr.stager_in.emit(now, names::STAGE_IN_STOP, Some(uid), None);
        match res {
            Ok(()) => true,
            Err(e) => {
                self.finish(uid, TaskState::Failed, Some(e.to_string()), Which::StagerIn);
                false
            }
        }
    }

    fn submit(&mut self, uid: &str, td: ValidatedDescription) {
        let scope = match self.sched.pinned_scope(&td) {
            Some(s) if self.dvms[s].state == DvmState::Ready => s,
            _ => match self.selector.select(td.tag.as_deref(), &self.dvms, self.cfg.dvm_policy) {
                Ok(id) => id as usize,
                Err(e) => {
                    self.finish(uid, TaskState::Failed, Some(e.to_string()), Which::Scheduler);
                    return;
                }
            },
        };
        self.tasks.get_mut(uid).expect("task admitted").td = Some(td.clone());
        match self.sched.submit(scope, td, uid.to_string()) {
            Admission::Placed(p, uid) => self.place(&uid, p),
            Admission::Waiting => {
                let now = self.clock.now();
                self.tr.scheduler.emit(now, names::SCHEDULE_WAIT, Some(uid), None);
            }
            Admission::Rejected(reason, uid) => self.finish(&uid, TaskState::Failed, Some(reason), Which::Scheduler),
        }
    }

    fn place(&mut self, uid: &str, p: Placement) {
        let now = self.clock.now();
        let dvm = p.dvm_id.unwrap_or(0) as usize;
        self.tr.scheduler.emit(now, names::SCHEDULE_OK, Some(uid), Some(&p.encode()));
        let st = self.tasks.get_mut(uid).expect("placed task is known");
        st.task.placement = Some(p);
        let _ = st.task.advance(TaskState::Scheduled, now, &mut self.tr.scheduler);
        self.notifier.task(&st.task, now);
        let attempt = st.attempt;
        self.dvms[dvm].inflight += 1;
        self.tr.executors[dvm].emit(now, names::PREPARE_START, Some(uid), None);
        let at = now + self.sampler.prepare();
        self.push(
            at,
            Ev::Launch {
                uid: uid.to_string(),
                attempt,
            },
        );
    }

    fn current(&self, uid: &str, attempt: u32) -> bool {
        self.tasks.get(uid).is_some_and(|t| t.attempt == attempt && !t.task.state.is_terminal())
    }

    fn process(&mut self) {
        while let Some(Reverse((_, _, ev))) = self.heap.peek() {
            if !ev.is_work() && self.active == 0 {
                break;
            }
            let Reverse((t, _, ev)) = self.heap.pop().expect("peeked");
            let t = t.max(self.clock.now());
            self.clock.advance_to(t);
            match ev {
                Ev::Launch { uid, attempt } if self.current(&uid, attempt) => self.launch(&uid, attempt),
                Ev::ExecDone { uid, attempt } if self.current(&uid, attempt) => self.exec_done(&uid, attempt),
                Ev::SpawnReturn { uid, attempt } if self.current(&uid, attempt) => self.spawn_return(&uid),
                Ev::DvmFail(d) => self.dvm_fail(d),
                Ev::Walltime => self.walltime(),
                _ => {}
            }
        }
    }

    fn dvm_of(&self, uid: &str) -> usize {
        self.tasks[uid]
            .task
            .placement
            .as_ref()
            .and_then(|p| p.dvm_id)
            .unwrap_or(0) as usize
    }

    fn launch(&mut self, uid: &str, attempt: u32) {
        let now = self.clock.now();
        let dvm = self.dvm_of(uid);
        self.tr.executors[dvm].emit(now, names::EXEC_START, Some(uid), None);
        let st = self.tasks.get_mut(uid).expect("known");
        let _ = st.task.advance(TaskState::Executing, now, &mut self.tr.executors[dvm]);
        self.notifier.task(&st.task, now);
        let at = now + st.duration;
        self.push(
            at,
            Ev::ExecDone {
                uid: uid.to_string(),
                attempt,
            },
        );
    }

    fn exec_done(&mut self, uid: &str, attempt: u32) {
        let now = self.clock.now();
        let dvm = self.dvm_of(uid);
        self.tr.executors[dvm].emit(now, names::EXEC_STOP, Some(uid), None);
        let others = self.dvms[dvm].inflight.saturating_sub(1);
        let at = now + self.sampler.ack(others);
        self.push(
            at,
            Ev::SpawnReturn {
                uid: uid.to_string(),
                attempt,
            },
        );
    }

    fn spawn_return(&mut self, uid: &str) {
        let now = self.clock.now();
        let dvm = self.dvm_of(uid);
        self.tr.executors[dvm].emit(now, names::SPAWN_RETURN, Some(uid), None);
        self.dvms[dvm].inflight -= 1;
        let st = self.tasks.get_mut(uid).expect("known");
        let placement = st.task.placement.clone().expect("executing task holds slots");
        st.task.exit_code = Some(st.exit_code);
        let code = st.exit_code;
        let stage_out = !st.task.description.stage_out.is_empty();
        let scope = self.sched.release_quiet(&placement).expect("placement is live");
        if code != 0 {
            self.finish(uid, TaskState::Failed, Some(format!("exit code {code}")), Which::Scheduler);
        } else if !stage_out {
            self.finish(uid, TaskState::Done, None, Which::Scheduler);
        } else {
            self.tr.stager_out.emit(now, names::STAGE_OUT_START, Some(uid), None);
            let st = self.tasks.get_mut(uid).expect("known");
            let _ = st.task.advance(TaskState::StagingOut, now, &mut self.tr.stager_out);
            self.notifier.task(&st.task, now);
            let sandbox = sandbox_of(&self.cfg.staging_root, uid);
            let res = stage(&st.task.description.stage_out, Direction::Out, &sandbox, &self.cfg.staging_base);
            self.tr.stager_out.emit(now, names::STAGE_OUT_STOP, Some(uid), None);
            match res {
                Ok(()) => self.finish(uid, TaskState::Done, None, Which::StagerOut),
                Err(e) => self.finish(uid, TaskState::Failed, Some(e.to_string()), Which::StagerOut),
            }
        }
        self.rescan(scope);
    }

    fn rescan(&mut self, scope: usize) {
        for (p, uid) in self.sched.rescan(scope) {
            self.place(&uid, p);
        }
    }

    /// Releases the slots of a placed task and invalidates its pending
    /// events. Returns the scope it occupied.
    fn unplace(&mut self, uid: &str) -> Option<usize> {
        let st = self.tasks.get_mut(uid)?;
        let p = st.task.placement.clone()?;
        st.attempt += 1;
        let dvm = p.dvm_id.unwrap_or(0) as usize;
        self.dvms[dvm].inflight = self.dvms[dvm].inflight.saturating_sub(1);
        self.sched.release_quiet(&p).ok()
    }

    fn cancel(&mut self, uids: Vec<String>) {
        let mut scopes = BTreeSet::new();
        for uid in uids {
            let Some(st) = self.tasks.get(&uid) else {
                self.canceled.insert(uid);
                continue;
            };
            if st.task.state.is_terminal() {
                continue;
            }
            if st.task.placement.is_some() {
                scopes.extend(self.unplace(&uid));
            } else {
                let _ = self.sched.remove_waiting(&uid);
            }
            self.finish(&uid, TaskState::Canceled, Some("canceled".into()), Which::Scheduler);
        }
        for s in scopes {
            self.rescan(s);
        }
    }

    fn dvm_fail(&mut self, d: u32) {
        let now = self.clock.now();
        let Some(dvm) = self.dvms.get_mut(d as usize) else {
            log::warn!("{}: no DVM {d} to fail", self.cfg.pilot.uid);
            return;
        };
        if dvm.state != DvmState::Ready {
            return;
        }
        dvm.state = DvmState::Failed;
        self.tr.agent.emit(now, names::DVM_FAILED, None, Some(&d.to_string()));
        let inflight: Vec<String> = self
            .tasks
            .iter()
            .filter(|(_, t)| t.task.placement.as_ref().is_some_and(|p| p.dvm_id == Some(d)))
            .map(|(u, _)| u.clone())
            .collect();
        let waiting = self.sched.deactivate(d as usize);
        for uid in inflight {
            self.unplace(&uid);
            let st = self.tasks.get_mut(&uid).expect("known");
            if st.task.retries > 0 {
                self.finish(&uid, TaskState::Failed, Some(format!("DVM {d} failed on retry")), Which::Scheduler);
                continue;
            }
            let _ = st.task.requeue(now, &mut self.tr.scheduler);
            self.notifier.task(&st.task, now);
            let td = st.td.clone().expect("placed task was validated");
            self.submit(&uid, td);
        }
        for (td, uid) in waiting {
            self.submit(&uid, td);
        }
    }

    fn walltime(&mut self) {
        let now = self.clock.now();
        self.tr.agent.emit(now, names::WALLTIME_EXCEEDED, None, None);
        self.cancel_all = true;
        for uid in self.live_uids() {
            if self.tasks[&uid].task.placement.is_some() {
                self.unplace(&uid);
            } else {
                let _ = self.sched.remove_waiting(&uid);
            }
            self.finish(&uid, TaskState::Canceled, Some("walltime exceeded".into()), Which::Scheduler);
        }
    }

    fn finalize(mut self) -> AgentSummary {
        let uids = self.live_uids();
        self.cancel(uids);
        let stop = self.clock.now() + Micros::from_secs_f64(self.cfg.pilot.launcher_latency_model.teardown_s);
        self.clock.advance_to(stop);
        for d in &mut self.dvms {
            if d.state == DvmState::Ready {
                d.state = DvmState::Down;
                self.tr.agent.emit(stop, names::DVM_STOP, None, Some(&d.id.to_string()));
            }
        }
        self.tr.agent.emit(stop, names::AGENT_STOP, None, None);
        debug_assert_eq!(self.sched.busy_len(), 0);
        let pilot = self.cfg.pilot.uid.clone();
        self.notifier.push(Notice::Pilot {
            pilot,
            state: PilotState::Done,
            reason: None,
        });
        self.notifier.flush();
        let Tracers {
            agent,
            bridge,
            stager_in,
            scheduler,
            executors,
            stager_out,
        } = self.tr;
        for t in [agent, bridge, stager_in, scheduler, stager_out].into_iter().chain(executors) {
            t.close();
        }
        self.summary
    }
}

#[derive(Clone, Copy)]
enum Which {
    Bridge,
    Scheduler,
    StagerIn,
    StagerOut,
}
