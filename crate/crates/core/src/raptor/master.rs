use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use super::{
    calls_channel, ctl_channel, results_channel, work_channel, worker_uid, CallResult, CallState, FromWorker,
    FunctionCall, FunctionEnv, MasterConfig, ToMaster, ToWorker, WORKER_FUNCTION,
};
use crate::bus::{Channel, ChannelKind};
use crate::task::{Task, TaskDescription, TaskState};
use crate::tracer::{names, Tracer};

struct Worker {
    capacity: u32,
    inflight: HashMap<String, FunctionCall>,
    last_seen: Instant,
    work: Channel,
}

struct Master<'a> {
    uid: String,
    cfg: MasterConfig,
    env: &'a FunctionEnv,
    tracer: Tracer,
    /// Registered workers, in uid order so dispatch ties break the same
    /// way every run.
    workers: BTreeMap<String, Worker>,
    pending: VecDeque<FunctionCall>,
    redispatched: HashSet<String>,
    done: HashSet<String>,
    out: Vec<CallResult>,
    results: Channel,
    submitted: u64,
}

impl Master<'_> {
    fn emit(&mut self, name: &str, uid: Option<&str>, detail: Option<&str>) {
        let now = self.env.clock.now();
        self.tracer.emit(now, name, uid, detail);
    }

    fn open(&self, name: &str) -> Result<Channel, String> {
        self.env
            .bus
            .open_channel(name, ChannelKind::Queue, self.env.transport.clone())
            .map_err(|e| e.to_string())
    }

    fn launch_workers(&mut self, n: u32) -> Result<(), String> {
        let queue = self
            .env
            .bus
            .get(&self.env.task_queue)
            .ok_or_else(|| format!("task queue {} is gone", self.env.task_queue))?;
        let mut tasks = Vec::new();
        for i in 0..n {
            let wuid = worker_uid(&self.uid, i);
            // the work queue exists before the worker can ask for it
            self.open(&work_channel(&wuid))?;
            let td = TaskDescription::function(&wuid, WORKER_FUNCTION)
                .with_args([self.uid.clone(), self.cfg.heartbeat_s.to_string()])
                .with_cores(self.cfg.cores_per_worker);
            let now = self.env.clock.now();
            self.tracer.emit(now, names::TASK_SUBMIT, Some(&wuid), Some(&self.env.pilot));
            let mut task = Task::new(td);
            let _ = task.advance(TaskState::Submitted, now, &mut self.tracer);
            tasks.push(task);
        }
        queue.send_msgs(&tasks).map_err(|e| e.to_string())
    }

    fn on_worker(&mut self, msg: FromWorker) -> Result<(), String> {
        let now = Instant::now();
        match msg {
            FromWorker::Register { worker, capacity } => {
                if let Some(w) = self.workers.get_mut(&worker) {
                    w.capacity = capacity;
                    w.last_seen = now;
                } else {
                    let work = self.open(&work_channel(&worker))?;
                    self.workers.insert(
                        worker.clone(),
                        Worker {
                            capacity,
                            inflight: HashMap::new(),
                            last_seen: now,
                            work,
                        },
                    );
                    self.emit(names::WORKER_REGISTER, Some(&worker), Some(&capacity.to_string()));
                }
            }
            FromWorker::Heartbeat { worker } => {
                if let Some(w) = self.workers.get_mut(&worker) {
                    w.last_seen = now;
                }
            }
            FromWorker::Results { worker, results } => {
                if let Some(w) = self.workers.get_mut(&worker) {
                    w.last_seen = now;
                }
                for r in results {
                    for w in self.workers.values_mut() {
                        if w.inflight.remove(&r.call_uid).is_some() {
                            break;
                        }
                    }
                    if self.done.insert(r.call_uid.clone()) {
                        self.out.push(r);
                    }
                }
            }
        }
        Ok(())
    }

    fn reap_lost(&mut self) {
        let timeout = Duration::from_secs_f64(self.cfg.worker_timeout_s.max(0.01));
        let lost: Vec<String> = self
            .workers
            .iter()
            .filter(|(_, w)| w.last_seen.elapsed() > timeout)
            .map(|(u, _)| u.clone())
            .collect();
        for uid in lost {
            self.lose(&uid);
        }
    }

    /// Drops a worker; its unfinished calls go back to the front of the
    /// queue once, then fail.
    fn lose(&mut self, uid: &str) {
        let Some(w) = self.workers.remove(uid) else { return };
        self.emit(names::WORKER_LOST, Some(uid), Some(&w.inflight.len().to_string()));
        log::warn!("{}: worker {uid} lost, {} worker(s) left", self.uid, self.workers.len());
        let mut calls: Vec<FunctionCall> = w.inflight.into_values().collect();
        calls.sort_by(|a, b| b.call_uid.cmp(&a.call_uid));
        for call in calls {
            if self.done.contains(&call.call_uid) {
                continue;
            }
            if self.redispatched.insert(call.call_uid.clone()) {
                self.emit(names::CALL_REDISPATCH, Some(&call.call_uid), Some(uid));
                self.pending.push_front(call);
            } else {
                self.done.insert(call.call_uid.clone());
                self.out.push(CallResult {
                    call_uid: call.call_uid,
                    state: CallState::Failed,
                    output: format!("worker {uid} lost twice").into_bytes(),
                    worker: uid.to_string(),
                });
            }
        }
    }

    fn hold(&self, w: &Worker) -> usize {
        w.capacity.max(1) as usize * self.cfg.prefetch_per_core as usize
    }

    fn has_room(&self) -> bool {
        self.workers.values().any(|w| w.inflight.len() < self.hold(w))
    }

    /// Least-loaded first, up to `dispatch_batch` calls per message and
    /// `prefetch_per_core` calls held per worker core.
    fn dispatch(&mut self) {
        let batch = self.cfg.dispatch_batch as usize;
        let per_core = self.cfg.prefetch_per_core as usize;
        while !self.pending.is_empty() {
            let cap = |w: &Worker| w.capacity.max(1) as usize * per_core;
            let Some((uid, room)) = self
                .workers
                .iter()
                .filter(|(_, w)| w.inflight.len() < cap(w))
                .min_by_key(|(_, w)| w.inflight.len())
                .map(|(u, w)| (u.clone(), cap(w) - w.inflight.len()))
            else {
                return;
            };
            let n = batch.min(room).min(self.pending.len());
            let calls: Vec<FunctionCall> = self.pending.drain(..n).collect();
            let w = self.workers.get_mut(&uid).expect("chosen");
            if let Err(e) = w.work.send_msg(&ToWorker::Calls(calls.clone())) {
                log::warn!("{}: cannot reach {uid}: {e}", self.uid);
                for c in calls.into_iter().rev() {
                    self.pending.push_front(c);
                }
                self.lose(&uid);
                continue;
            }
            for c in calls {
                w.inflight.insert(c.call_uid.clone(), c);
            }
        }
    }

    fn flush(&mut self) {
        if self.out.is_empty() {
            return;
        }
        let out = std::mem::take(&mut self.out);
        if let Err(e) = self.results.send_msg(&out) {
            log::warn!("{}: results dropped: {e}", self.uid);
        }
    }

    fn idle(&self) -> bool {
        self.pending.is_empty() && self.workers.values().all(|w| w.inflight.is_empty())
    }
}

pub(super) fn run(uid: &str, cfg: MasterConfig, env: &FunctionEnv, cancel: &AtomicBool) -> Result<Vec<u8>, String> {
    let open = |name: String| {
        env.bus
            .open_channel(&name, ChannelKind::Queue, env.transport.clone())
            .map_err(|e| e.to_string())
    };
    let mut calls_rx = open(calls_channel(uid))?.receiver().map_err(|e| e.to_string())?;
    let results = open(results_channel(uid))?;
    let mut ctl_rx = open(ctl_channel(uid))?.receiver().map_err(|e| e.to_string())?;
    let mut m = Master {
        uid: uid.to_string(),
        tracer: env.sink.tracer(format!("{}.raptor.{uid}", env.pilot)),
        cfg,
        env,
        workers: BTreeMap::new(),
        pending: VecDeque::new(),
        redispatched: HashSet::new(),
        done: HashSet::new(),
        out: Vec::new(),
        results,
        submitted: 0,
    };
    m.emit(names::MASTER_START, None, None);
    m.launch_workers(m.cfg.workers_per_master)?;
    let started = Instant::now();
    let mut warned = false;
    let mut stopping = false;
    while !cancel.load(Ordering::Relaxed) {
        let wait = if m.pending.is_empty() || m.workers.is_empty() {
            Duration::from_millis(5)
        } else if m.has_room() {
            Duration::ZERO
        } else {
            Duration::from_millis(1)
        };
        let msgs: Vec<FromWorker> = ctl_rx.recv_msgs(4096, wait).map_err(|e| e.to_string())?;
        for msg in msgs {
            m.on_worker(msg)?;
        }
        for msg in calls_rx.recv_msgs::<ToMaster>(64, Duration::ZERO).map_err(|e| e.to_string())? {
            match msg {
                ToMaster::Calls(calls) => {
                    m.submitted += calls.len() as u64;
                    m.pending.extend(calls);
                }
                ToMaster::Stop => stopping = true,
            }
        }
        if !warned && started.elapsed() > Duration::from_secs(5) && m.workers.len() < m.cfg.workers_per_master as usize {
            warned = true;
            log::warn!(
                "{uid}: only {} of {} workers registered",
                m.workers.len(),
                m.cfg.workers_per_master
            );
        }
        m.reap_lost();
        m.dispatch();
        m.flush();
        if stopping && m.idle() {
            break;
        }
    }
    for w in m.workers.values() {
        let _ = w.work.send_msg(&ToWorker::Stop);
    }
    m.flush();
    m.emit(names::MASTER_STOP, None, Some(&m.done.len().to_string()));
    if cancel.load(Ordering::Relaxed) {
        return Err("canceled".into());
    }
    Ok(format!("{} of {} calls", m.done.len(), m.submitted).into_bytes())
}
