//! Threaded agent for local pilots.
//!
//! Stages (bridge, stager-in, scheduler, executors, stager-out) run on
//! their own threads and only talk through bus channels. Every stage
//! subscribes to the pilot's control topic. Shutdown closes the stage
//! channels front to back so each stage drains before the next one stops.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::process::Child;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver as CbReceiver, Sender as CbSender};

use super::{sandbox_of, stage, AgentConfig, AgentContext, AgentError, AgentSummary, Direction};
use crate::bus::{Channel, ChannelKind, Receiver};
use crate::executor::{build_launch_command, exit_code_of, functions, start_child, TERM_GRACE};
use crate::pilot::build_node_list;
use crate::protocol::{Control, Notice, Notifier, PilotState};
use crate::raptor::{self, FunctionEnv};
use crate::scheduler::{schedule_loop, Placement, ScheduleIo, Scheduler, SlotMap};
use crate::task::{Task, TaskKind, TaskState};
use crate::time::{Clock, Micros};
use crate::tracer::{names, Tracer};

const POLL: Duration = Duration::from_millis(1);
const IDLE: Duration = Duration::from_millis(20);

/// Cancel requests as seen by one stage.
#[derive(Default)]
struct Cancels {
    uids: HashSet<String>,
    all: bool,
    shutdown: bool,
}

impl Cancels {
    /// Applies pending control messages; returns uids newly canceled.
    fn update(&mut self, rx: &mut Receiver) -> Vec<String> {
        let mut fresh = Vec::new();
        for m in rx.recv_msgs::<Control>(256, Duration::ZERO).unwrap_or_default() {
            match m {
                Control::Cancel { uids } => {
                    for u in uids {
                        if self.uids.insert(u.clone()) {
                            fresh.push(u);
                        }
                    }
                }
                Control::CancelAll => self.all = true,
                Control::Shutdown => {
                    self.all = true;
                    self.shutdown = true;
                }
                Control::Drive { .. } => {}
            }
        }
        fresh
    }

    fn hit(&self, uid: &str) -> bool {
        self.all || self.uids.contains(uid)
    }
}

/// Shared pieces every stage thread gets.
#[derive(Clone)]
struct StageEnv {
    pilot: String,
    clock: Clock,
    notify: Option<Channel>,
}

impl StageEnv {
    fn notifier(&self) -> Notifier {
        Notifier::new(self.notify.clone(), self.pilot.clone())
    }
}

fn terminal(
    task: &mut Task,
    state: TaskState,
    reason: Option<String>,
    tracer: &mut Tracer,
    notifier: &mut Notifier,
    clock: &Clock,
    summary: &mut AgentSummary,
) {
    let now = clock.now();
    if reason.is_some() {
        task.reason = reason;
    }
    if task.advance(state, now, tracer).is_ok() {
        notifier.task(task, now);
        match state {
            TaskState::Done => summary.done += 1,
            TaskState::Failed => summary.failed += 1,
            _ => summary.canceled += 1,
        }
    }
}

fn send(ch: &Channel, task: &Task) {
    if let Err(e) = ch.send_msg(task) {
        log::warn!("cannot forward {}: {e}", task.uid());
    }
}

struct Wiring {
    stage_in: Channel,
    scheduling: Channel,
    executing: Channel,
    completions: Channel,
    stage_out: Channel,
}

pub(super) fn start(
    cfg: AgentConfig,
    ctx: AgentContext,
    queue: Channel,
    control: &Channel,
) -> Result<JoinHandle<AgentSummary>, AgentError> {
    let uid = cfg.pilot.uid.clone();
    let open = |stage: &str| {
        ctx.bus
            .open_channel(&format!("{uid}.agent.{stage}"), ChannelKind::Queue, cfg.transport.clone())
    };
    let wiring = Wiring {
        stage_in: open("stage_in")?,
        scheduling: open("scheduling")?,
        executing: open("executing")?,
        completions: open("completions")?,
        stage_out: open("stage_out")?,
    };
    let n_exec = cfg.executor_count as usize;
    // one control subscription per stage thread plus the coordinator
    let mut subs = Vec::new();
    for _ in 0..5 + n_exec {
        subs.push(control.receiver()?);
    }
    let tasks_rx = queue.receiver()?;
    let stage_rx = Receivers {
        stage_in: wiring.stage_in.receiver()?,
        scheduling: wiring.scheduling.receiver()?,
        completions: wiring.completions.receiver()?,
        executing: (0..n_exec).map(|_| wiring.executing.receiver()).collect::<Result<_, _>>()?,
        stage_out: wiring.stage_out.receiver()?,
    };
    let control = control.clone();
    thread::Builder::new()
        .name(format!("{uid}.agent"))
        .spawn(move || coordinator(cfg, ctx, control, wiring, stage_rx, tasks_rx, subs))
        .map_err(|e| AgentError::FabricUnavailable(e.to_string()))
}

struct Receivers {
    stage_in: Receiver,
    scheduling: Receiver,
    completions: Receiver,
    executing: Vec<Receiver>,
    stage_out: Receiver,
}

fn coordinator(
    cfg: AgentConfig,
    ctx: AgentContext,
    control: Channel,
    wiring: Wiring,
    rx: Receivers,
    tasks_rx: Receiver,
    mut subs: Vec<Receiver>,
) -> AgentSummary {
    let uid = cfg.pilot.uid.clone();
    let clock = ctx.clock.clone();
    let mut tr = ctx.sink.tracer(format!("{uid}.agent"));
    let t0 = clock.now();
    tr.emit(t0, names::PILOT_START, None, None);
    let env = StageEnv {
        pilot: uid.clone(),
        clock: clock.clone(),
        notify: ctx.notify.clone(),
    };
    let mut my_control = subs.pop().expect("coordinator subscription");
    let spawn = |name: &str, f: Box<dyn FnOnce() -> AgentSummary + Send>| {
        thread::Builder::new()
            .name(format!("{uid}.{name}"))
            .spawn(f)
            .expect("spawn agent stage")
    };

    let bridge = {
        let (env, ctl, tr) = (env.clone(), subs.pop().unwrap(), ctx.sink.tracer(format!("{uid}.bridge")));
        let (si, sc, bulk) = (wiring.stage_in.clone(), wiring.scheduling.clone(), cfg.bulk_size as usize);
        spawn("bridge", Box::new(move || bridge_stage(env, tasks_rx, ctl, tr, si, sc, bulk)))
    };
    let stager_in = {
        let (env, ctl, tr) = (env.clone(), subs.pop().unwrap(), ctx.sink.tracer(format!("{uid}.stager_in")));
        let (input, out) = (rx.stage_in, wiring.scheduling.clone());
        let (root, base) = (cfg.staging_root.clone(), cfg.staging_base.clone());
        spawn("stager_in", Box::new(move || stager_in_stage(env, input, ctl, tr, out, root, base)))
    };
    let scheduler = {
        let io = ScheduleIo {
            incoming: rx.scheduling,
            completions: rx.completions,
            out: wiring.executing.clone(),
            control: subs.pop().unwrap(),
        };
        let (env, pd) = (env.clone(), cfg.pilot.clone());
        let mut tr = ctx.sink.tracer(format!("{uid}.scheduler"));
        spawn(
            "scheduler",
            Box::new(move || {
                let sched = Scheduler::single(SlotMap::from_node_list(build_node_list(&pd), pd.cores_per_node, pd.gpus_per_node));
                let mut notifier = env.notifier();
                let stats = schedule_loop(io, sched, &pd, &mut tr, &mut notifier, &env.clock);
                tr.close();
                AgentSummary {
                    failed: stats.failed,
                    canceled: stats.canceled,
                    ..AgentSummary::default()
                }
            }),
        )
    };
    let emulator = cfg.emulator.clone().or_else(find_emulator);
    let fenv = FunctionEnv {
        bus: Arc::clone(&ctx.bus),
        sink: Arc::clone(&ctx.sink),
        clock: clock.clone(),
        pilot: uid.clone(),
        task_queue: cfg.task_queue.clone(),
        transport: cfg.transport.clone(),
        seed: cfg.seed,
    };
    let n_exec = rx.executing.len();
    let executors: Vec<_> = rx
        .executing
        .into_iter()
        .enumerate()
        .map(|(i, input)| {
            let name = if n_exec == 1 {
                format!("{uid}.executor")
            } else {
                format!("{uid}.executor.{i}")
            };
            let ex = Executor {
                env: env.clone(),
                tracer: ctx.sink.tracer(name),
                control: subs.pop().unwrap(),
                completions: wiring.completions.clone(),
                stage_out: wiring.stage_out.clone(),
                root: cfg.staging_root.clone(),
                emulator: emulator.clone(),
                fenv: fenv.clone(),
            };
            spawn("executor", Box::new(move || ex.run(input)))
        })
        .collect();
    let stager_out = {
        let (env, ctl, tr) = (env.clone(), subs.pop().unwrap(), ctx.sink.tracer(format!("{uid}.stager_out")));
        let input = rx.stage_out;
        let (root, base) = (cfg.staging_root.clone(), cfg.staging_base.clone());
        spawn("stager_out", Box::new(move || stager_out_stage(env, input, ctl, tr, root, base)))
    };

    tr.emit(clock.now(), names::AGENT_READY, None, None);
    let mut notifier = env.notifier();
    notifier.push(Notice::Pilot {
        pilot: uid.clone(),
        state: PilotState::Active,
        reason: None,
    });
    notifier.flush();

    let deadline = t0 + Micros::from_secs_f64(cfg.pilot.walltime_s);
    let mut walltime_hit = false;
    loop {
        match my_control.recv_msgs::<Control>(16, Duration::from_millis(50)) {
            Ok(msgs) if msgs.contains(&Control::Shutdown) => break,
            Ok(_) => {}
            Err(_) => break,
        }
        let now = clock.now();
        if !walltime_hit && now >= deadline {
            walltime_hit = true;
            tr.emit(now, names::WALLTIME_EXCEEDED, None, None);
            let _ = control.send_msg(&Control::CancelAll);
        }
    }

    // drain the pipeline front to back
    let mut summary = AgentSummary::default();
    let mut add = |s: AgentSummary| {
        summary.pulled += s.pulled;
        summary.done += s.done;
        summary.failed += s.failed;
        summary.canceled += s.canceled;
    };
    add(bridge.join().unwrap_or_default());
    wiring.stage_in.close();
    add(stager_in.join().unwrap_or_default());
    wiring.scheduling.close();
    add(scheduler.join().unwrap_or_default());
    wiring.executing.close();
    for e in executors {
        add(e.join().unwrap_or_default());
    }
    wiring.completions.close();
    wiring.stage_out.close();
    add(stager_out.join().unwrap_or_default());
    tr.emit(clock.now(), names::AGENT_STOP, None, None);
    tr.close();
    notifier.push(Notice::Pilot {
        pilot: uid,
        state: PilotState::Done,
        reason: walltime_hit.then(|| "walltime exceeded".to_string()),
    });
    notifier.flush();
    summary
}

/// The emulator binary next to the running executable, if there is one.
fn find_emulator() -> Option<PathBuf> {
    let exe = std::env::current_exe().ok()?;
    let dir = exe.parent()?;
    [dir.to_path_buf(), dir.parent()?.to_path_buf()]
        .into_iter()
        .map(|d| d.join("pilotkit-emulate"))
        .find(|p| p.is_file())
}

fn bridge_stage(
    env: StageEnv,
    mut tasks: Receiver,
    mut control: Receiver,
    mut tr: Tracer,
    stage_in: Channel,
    scheduling: Channel,
    bulk: usize,
) -> AgentSummary {
    let mut summary = AgentSummary::default();
    let mut cancels = Cancels::default();
    let mut notifier = env.notifier();
    loop {
        cancels.update(&mut control);
        if cancels.shutdown {
            break;
        }
        let batch: Vec<Task> = match tasks.recv_msgs(bulk, IDLE) {
            Ok(b) => b,
            Err(_) => break,
        };
        for mut task in batch {
            let now = env.clock.now();
            summary.pulled += 1;
            tr.emit(now, names::DB_BRIDGE_PULL, Some(task.uid()), Some(&task.description.shape()));
            task.pilot = Some(env.pilot.clone());
            if task.state == TaskState::New {
                task.state = TaskState::Submitted;
            }
            let _ = task.advance(TaskState::AgentPulled, now, &mut tr);
            notifier.task(&task, now);
            if cancels.hit(task.uid()) {
                let r = Some("canceled".into());
                terminal(&mut task, TaskState::Canceled, r, &mut tr, &mut notifier, &env.clock, &mut summary);
            } else if task.description.stage_in.is_empty() {
                send(&scheduling, &task);
            } else {
                send(&stage_in, &task);
            }
        }
        notifier.flush();
    }
    tr.close();
    summary
}

fn stager_in_stage(
    env: StageEnv,
    mut input: Receiver,
    mut control: Receiver,
    mut tr: Tracer,
    out: Channel,
    root: PathBuf,
    base: PathBuf,
) -> AgentSummary {
    let mut summary = AgentSummary::default();
    let mut cancels = Cancels::default();
    let mut notifier = env.notifier();
    loop {
        cancels.update(&mut control);
        let batch: Vec<Task> = match input.recv_msgs(64, IDLE) {
            Ok(b) => b,
            Err(_) => break,
        };
        for mut task in batch {
            let clock = &env.clock;
            if cancels.hit(task.uid()) {
                let r = Some("canceled".into());
                terminal(&mut task, TaskState::Canceled, r, &mut tr, &mut notifier, clock, &mut summary);
                continue;
            }
            let uid = task.uid().to_string();
            tr.emit(clock.now(), names::STAGE_IN_START, Some(&uid), None);
            let _ = task.advance(TaskState::StagingIn, clock.now(), &mut tr);
            notifier.task(&task, clock.now());
            let res = stage(&task.description.stage_in, Direction::In, &sandbox_of(&root, &uid), &base);
            tr.emit(clock.now(), names::STAGE_IN_STOP, Some(&uid), None);
            match res {
                Ok(()) => send(&out, &task),
                Err(e) => {
                    let r = Some(e.to_string());
                    terminal(&mut task, TaskState::Failed, r, &mut tr, &mut notifier, clock, &mut summary);
                }
            }
        }
        notifier.flush();
    }
    tr.close();
    summary
}

fn stager_out_stage(
    env: StageEnv,
    mut input: Receiver,
    mut control: Receiver,
    mut tr: Tracer,
    root: PathBuf,
    base: PathBuf,
) -> AgentSummary {
    let mut summary = AgentSummary::default();
    let mut cancels = Cancels::default();
    let mut notifier = env.notifier();
    loop {
        cancels.update(&mut control);
        let batch: Vec<Task> = match input.recv_msgs(64, IDLE) {
            Ok(b) => b,
            Err(_) => break,
        };
        for mut task in batch {
            let clock = &env.clock;
            let uid = task.uid().to_string();
            // outputs of a finished payload are still collected after a
            // cancel-all, but explicitly canceled tasks are not
            if cancels.uids.contains(&uid) {
                let r = Some("canceled".into());
                terminal(&mut task, TaskState::Canceled, r, &mut tr, &mut notifier, clock, &mut summary);
                continue;
            }
            tr.emit(clock.now(), names::STAGE_OUT_START, Some(&uid), None);
            let _ = task.advance(TaskState::StagingOut, clock.now(), &mut tr);
            notifier.task(&task, clock.now());
            let res = stage(&task.description.stage_out, Direction::Out, &sandbox_of(&root, &uid), &base);
            tr.emit(clock.now(), names::STAGE_OUT_STOP, Some(&uid), None);
            let (state, reason) = match res {
                Ok(()) => (TaskState::Done, None),
                Err(e) => (TaskState::Failed, Some(e.to_string())),
            };
            terminal(&mut task, state, reason, &mut tr, &mut notifier, clock, &mut summary);
        }
        notifier.flush();
    }
    tr.close();
    summary
}

enum Work {
    Process(Child),
    Function(Arc<AtomicBool>),
}

struct Running {
    task: Task,
    work: Work,
    /// Set once a cancel reached the task: SIGKILL deadline for processes.
    kill_at: Option<Instant>,
}

struct Executor {
    env: StageEnv,
    tracer: Tracer,
    control: Receiver,
    completions: Channel,
    stage_out: Channel,
    root: PathBuf,
    emulator: Option<PathBuf>,
    fenv: FunctionEnv,
}

type FnResult = (String, Result<Vec<u8>, String>);

impl Executor {
    fn run(mut self, mut input: Receiver) -> AgentSummary {
        let mut summary = AgentSummary::default();
        let mut cancels = Cancels::default();
        let mut notifier = self.env.notifier();
        let mut running: HashMap<String, Running> = HashMap::new();
        let (fn_tx, fn_rx): (CbSender<FnResult>, CbReceiver<FnResult>) = unbounded();
        let mut input_open = true;
        while input_open || !running.is_empty() {
            let fresh = cancels.update(&mut self.control);
            let now = Instant::now();
            for (uid, r) in running.iter_mut() {
                if r.kill_at.is_none() && (cancels.all || fresh.contains(uid)) {
                    r.kill_at = Some(now + TERM_GRACE);
                    match &r.work {
                        // SAFETY: signalling a child we own and have not reaped.
                        Work::Process(c) => unsafe {
                            libc::kill(c.id() as libc::pid_t, libc::SIGTERM);
                        },
                        Work::Function(flag) => flag.store(true, Ordering::Relaxed),
                    }
                }
            }
            if input_open {
                let wait = if running.is_empty() { IDLE } else { POLL };
                match input.recv_msgs::<Task>(256, wait) {
                    Ok(batch) => {
                        for task in batch {
                            self.launch(task, &cancels, &mut running, &fn_tx, &mut notifier, &mut summary);
                        }
                    }
                    Err(_) => input_open = false,
                }
            } else {
                thread::sleep(POLL);
            }
            let mut finished: Vec<(String, i32, Option<String>)> = Vec::new();
            for (uid, r) in running.iter_mut() {
                if let Work::Process(child) = &mut r.work {
                    match child.try_wait() {
                        Ok(Some(status)) => finished.push((uid.clone(), exit_code_of(status), None)),
                        Ok(None) => {
                            if r.kill_at.is_some_and(|t| Instant::now() >= t) {
                                let _ = child.kill();
                            }
                        }
                        Err(e) => finished.push((uid.clone(), -1, Some(e.to_string()))),
                    }
                }
            }
            for (uid, res) in fn_rx.try_iter() {
                match res {
                    Ok(bytes) => {
                        if !bytes.is_empty() {
                            let dir = sandbox_of(&self.root, &uid);
                            let _ = std::fs::create_dir_all(&dir).and_then(|_| std::fs::write(dir.join("task.out"), &bytes));
                        }
                        finished.push((uid, 0, None));
                    }
                    Err(e) => finished.push((uid, 1, Some(e))),
                }
            }
            for (uid, code, reason) in finished {
                if let Some(r) = running.remove(&uid) {
                    self.complete(r, code, reason, &mut notifier, &mut summary);
                }
            }
            notifier.flush();
        }
        self.tracer.close();
        summary
    }

    fn release(&self, p: Option<Placement>) {
        if let Some(p) = p {
            if let Err(e) = self.completions.send_msg(&p) {
                log::debug!("completions: {e}");
            }
        }
    }

    fn launch(
        &mut self,
        mut task: Task,
        cancels: &Cancels,
        running: &mut HashMap<String, Running>,
        fn_tx: &CbSender<FnResult>,
        notifier: &mut Notifier,
        summary: &mut AgentSummary,
    ) {
        let clock = self.env.clock.clone();
        let uid = task.uid().to_string();
        if cancels.hit(&uid) {
            self.release(task.placement.clone());
            let r = Some("canceled".into());
            terminal(&mut task, TaskState::Canceled, r, &mut self.tracer, notifier, &clock, summary);
            return;
        }
        self.tracer.emit(clock.now(), names::PREPARE_START, Some(&uid), None);
        let sandbox = sandbox_of(&self.root, &uid);
        let work = match task.description.kind {
            TaskKind::Executable => {
                let placement = task.placement.clone().expect("scheduled task holds slots");
                build_launch_command(&task, &placement, self.emulator.as_deref())
                    .and_then(|cmd| start_child(&cmd, &sandbox))
                    .map(Work::Process)
                    .map_err(|e| e.to_string())
            }
            TaskKind::Function => {
                let flag = Arc::new(AtomicBool::new(false));
                let (t, f, tx, fenv) = (task.clone(), Arc::clone(&flag), fn_tx.clone(), self.fenv.clone());
                let uid2 = uid.clone();
                thread::Builder::new()
                    .name(format!("fn.{uid}"))
                    .spawn(move || {
                        let r = run_function(&t, &fenv, &f);
                        let _ = tx.send((uid2, r));
                    })
                    .map(|_| Work::Function(flag))
                    .map_err(|e| e.to_string())
            }
        };
        match work {
            Ok(work) => {
                let now = clock.now();
                self.tracer.emit(now, names::EXEC_START, Some(&uid), None);
                let _ = task.advance(TaskState::Executing, now, &mut self.tracer);
                notifier.task(&task, now);
                running.insert(
                    uid,
                    Running {
                        task,
                        work,
                        kill_at: None,
                    },
                );
            }
            Err(e) => {
                self.release(task.placement.clone());
                terminal(&mut task, TaskState::Failed, Some(e), &mut self.tracer, notifier, &clock, summary);
            }
        }
    }

    fn complete(
        &mut self,
        r: Running,
        code: i32,
        reason: Option<String>,
        notifier: &mut Notifier,
        summary: &mut AgentSummary,
    ) {
        let clock = self.env.clock.clone();
        let mut task = r.task;
        let uid = task.uid().to_string();
        self.tracer.emit(clock.now(), names::EXEC_STOP, Some(&uid), None);
        self.tracer.emit(clock.now(), names::SPAWN_RETURN, Some(&uid), None);
        self.release(task.placement.clone());
        task.exit_code = Some(code);
        let tr = &mut self.tracer;
        if r.kill_at.is_some() {
            terminal(&mut task, TaskState::Canceled, Some("canceled".into()), tr, notifier, &clock, summary);
        } else if code != 0 {
            let reason = reason.unwrap_or_else(|| format!("exit code {code}"));
            terminal(&mut task, TaskState::Failed, Some(reason), tr, notifier, &clock, summary);
        } else if task.description.stage_out.is_empty() {
            terminal(&mut task, TaskState::Done, None, tr, notifier, &clock, summary);
        } else {
            task.placement = None;
            send(&self.stage_out, &task);
        }
    }
}

fn run_function(task: &Task, env: &FunctionEnv, cancel: &AtomicBool) -> Result<Vec<u8>, String> {
    let td = &task.description;
    if raptor::is_raptor_function(&td.name) {
        return raptor::run_function(task, env, cancel);
    }
    functions::call(&td.name, &td.arguments.join(" "), cancel)
}

#[allow(dead_code)]
fn _assert_send(_: &Path) {}
