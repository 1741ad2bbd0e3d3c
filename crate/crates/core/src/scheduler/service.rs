use std::collections::HashSet;
use std::time::Duration;

use super::{Admission, Placement, Scheduler};
use crate::bus::{Channel, Receiver};
use crate::pilot::PilotDescription;
use crate::protocol::{Control, Notifier};
use crate::task::{validate_task_description, Task, TaskState};
use crate::time::Clock;
use crate::tracer::{names, Tracer};

/// Channels the scheduling stage is wired to.
pub struct ScheduleIo {
    /// Tasks ready to be placed.
    pub incoming: Receiver,
    /// Placements freed by the executors.
    pub completions: Receiver,
    /// Placed tasks, for the executors.
    pub out: Channel,
    pub control: Receiver,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ScheduleStats {
    pub placed: u64,
    pub failed: u64,
    pub canceled: u64,
}

struct Loop<'a> {
    sched: Scheduler<Task>,
    pd: &'a PilotDescription,
    tracer: &'a mut Tracer,
    notify: &'a mut Notifier,
    clock: &'a Clock,
    out: &'a Channel,
    stats: ScheduleStats,
    canceled: HashSet<String>,
    cancel_all: bool,
}

impl Loop<'_> {
    fn terminal(&mut self, mut task: Task, state: TaskState, reason: &str) {
        let now = self.clock.now();
        task.reason = Some(reason.to_string());
        if task.advance(state, now, self.tracer).is_ok() {
            self.notify.task(&task, now);
            if state == TaskState::Failed {
                self.stats.failed += 1;
            } else {
                self.stats.canceled += 1;
            }
        }
    }

    fn placed(&mut self, p: Placement, mut task: Task) {
        let now = self.clock.now();
        self.tracer.emit(now, names::SCHEDULE_OK, Some(&p.task_uid), Some(&p.encode()));
        task.placement = Some(p);
        let _ = task.advance(TaskState::Scheduled, now, self.tracer);
        self.notify.task(&task, now);
        self.stats.placed += 1;
        if let Err(e) = self.out.send_msg(&task) {
            // the executors are gone; nothing will free these slots
            log::warn!("{}: cannot hand {} to the executor: {e}", self.pd.uid, task.uid());
        }
    }

    fn arrive(&mut self, task: Task) {
        let uid = task.uid().to_string();
        if self.cancel_all || self.canceled.remove(&uid) {
            self.terminal(task, TaskState::Canceled, "canceled");
            return;
        }
        let td = match validate_task_description(&task.description, self.pd) {
            Ok(td) => td,
            Err(e) => return self.terminal(task, TaskState::Failed, &e.to_string()),
        };
        let scope = self.sched.pinned_scope(&td).unwrap_or(0);
        match self.sched.submit(scope, td, task) {
            Admission::Placed(p, task) => self.placed(p, task),
            Admission::Waiting => {
                let now = self.clock.now();
                self.tracer.emit(now, names::SCHEDULE_WAIT, Some(&uid), None);
            }
            Admission::Rejected(reason, task) => self.terminal(task, TaskState::Failed, &reason),
        }
    }

    fn control(&mut self, msg: Control) {
        match msg {
            Control::Cancel { uids } => {
                for uid in uids {
                    match self.sched.remove_waiting(&uid) {
                        Some((_, task)) => self.terminal(task, TaskState::Canceled, "canceled"),
                        None => {
                            self.canceled.insert(uid);
                        }
                    }
                }
            }
            Control::CancelAll | Control::Shutdown => {
                self.cancel_all = true;
                for (_, task) in self.sched.drain_waiting() {
                    self.terminal(task, TaskState::Canceled, "canceled");
                }
            }
            Control::Drive { .. } => {}
        }
    }
}

/// Places arriving tasks first-fit and re-places waiting ones whenever
/// completions free slots. Runs until `incoming` is closed and drained.
pub fn schedule_loop(
    mut io: ScheduleIo,
    sched: Scheduler<Task>,
    pd: &PilotDescription,
    tracer: &mut Tracer,
    notify: &mut Notifier,
    clock: &Clock,
) -> ScheduleStats {
    let bulk = pd.bulk_size.max(1) as usize;
    let mut lp = Loop {
        sched,
        pd,
        tracer,
        notify,
        clock,
        out: &io.out,
        stats: ScheduleStats::default(),
        canceled: HashSet::new(),
        cancel_all: false,
    };
    let mut busy = false;
    loop {
        if let Ok(msgs) = io.control.recv_msgs::<Control>(64, Duration::ZERO) {
            for m in msgs {
                lp.control(m);
            }
        }
        let freed: Vec<Placement> = io.completions.recv_msgs(4096, Duration::ZERO).unwrap_or_default();
        let mut scopes = Vec::new();
        for p in &freed {
            match lp.sched.release_quiet(p) {
                Ok(s) if !scopes.contains(&s) => scopes.push(s),
                Ok(_) => {}
                Err(e) => log::warn!("{}: {e}", pd.uid),
            }
        }
        for s in scopes {
            for (p, task) in lp.sched.rescan(s) {
                lp.placed(p, task);
            }
        }
        let wait = if busy || !freed.is_empty() {
            Duration::ZERO
        } else {
            Duration::from_millis(1)
        };
        match io.incoming.recv_msgs::<Task>(bulk, wait) {
            Ok(tasks) => {
                busy = !tasks.is_empty();
                for t in tasks {
                    lp.arrive(t);
                }
            }
            Err(_) => break,
        }
        lp.notify.flush();
    }
    for (_, task) in lp.sched.drain_waiting() {
        lp.terminal(task, TaskState::Canceled, "agent stopped");
    }
    lp.notify.flush();
    lp.stats
}
