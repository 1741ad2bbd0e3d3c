use std::collections::HashMap;
use std::sync::{Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::protocol::{Notice, PilotState};
use crate::task::TaskState;

/// Last known state of a task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInfo {
    pub uid: String,
    pub state: TaskState,
    pub pilot: Option<String>,
    pub exit_code: Option<i32>,
    pub reason: Option<String>,
    pub retries: u32,
}

#[derive(Default)]
pub(crate) struct Tables {
    pub tasks: HashMap<String, TaskInfo>,
    pub pilots: HashMap<String, (PilotState, Option<String>)>,
    pub idle: HashMap<String, u64>,
    /// Tasks known to the client that are not yet terminal.
    pub live: usize,
}

/// Client-side view of task and pilot states, fed by the notify topic.
#[derive(Default)]
pub(crate) struct Registry {
    tables: Mutex<Tables>,
    changed: Condvar,
}

impl Registry {
    pub fn lock(&self) -> MutexGuard<'_, Tables> {
        self.tables.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn insert_task(&self, info: TaskInfo) -> bool {
        let mut t = self.lock();
        if t.tasks.contains_key(&info.uid) {
            return false;
        }
        if !info.state.is_terminal() {
            t.live += 1;
        }
        t.tasks.insert(info.uid.clone(), info);
        true
    }

    pub fn set_pilot(&self, uid: &str, state: PilotState, reason: Option<String>) {
        self.lock().pilots.insert(uid.to_string(), (state, reason));
        self.changed.notify_all();
    }

    /// Applies notices. Task states only ever move forward here, so a
    /// requeue shows up as a retry count, not as a step back.
    pub fn apply(&self, notices: Vec<Notice>) {
        let mut t = self.lock();
        for n in notices {
            match n {
                Notice::Task(n) => {
                    let Some(info) = t.tasks.get_mut(&n.uid) else {
                        continue;
                    };
                    info.retries = info.retries.max(n.retries);
                    if n.state <= info.state || info.state.is_terminal() {
                        continue;
                    }
                    info.state = n.state;
                    info.pilot = Some(n.pilot);
                    if n.exit_code.is_some() {
                        info.exit_code = n.exit_code;
                    }
                    if n.reason.is_some() {
                        info.reason = n.reason;
                    }
                    if n.state.is_terminal() {
                        t.live -= 1;
                    }
                }
                Notice::Pilot { pilot, state, reason } => {
                    let cur = t.pilots.entry(pilot).or_insert((PilotState::Pending, None));
                    if !cur.0.is_final() {
                        *cur = (state, reason);
                    }
                }
                Notice::Idle { pilot, seq } => {
                    let e = t.idle.entry(pilot).or_insert(0);
                    *e = (*e).max(seq);
                }
            }
        }
        drop(t);
        self.changed.notify_all();
    }

    /// Blocks until `done` holds or `deadline` passes; returns whether
    /// `done` held.
    pub fn wait_until(&self, deadline: Option<Instant>, mut done: impl FnMut(&Tables) -> bool) -> bool {
        let mut t = self.lock();
        loop {
            if done(&t) {
                return true;
            }
            let step = match deadline {
                Some(d) => {
                    let now = Instant::now();
                    if now >= d {
                        return false;
                    }
                    (d - now).min(Duration::from_millis(100))
                }
                None => Duration::from_millis(100),
            };
            t = self
                .changed
                .wait_timeout(t, step)
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::TaskNotice;
    use crate::time::Micros;
    use proptest::prelude::*;

    fn notice(state: TaskState) -> Notice {
        Notice::Task(TaskNotice {
            uid: "t".into(),
            pilot: "p".into(),
            state,
            ts: Micros(0),
            exit_code: None,
            reason: None,
            retries: 0,
        })
    }

    proptest! {
        #[test]
        fn states_never_move_back(seq in prop::collection::vec(0usize..TaskState::ALL.len(), 0..30)) {
            let r = Registry::default();
            r.insert_task(TaskInfo {
                uid: "t".into(),
                state: TaskState::Submitted,
                pilot: None,
                exit_code: None,
                reason: None,
                retries: 0,
            });
            let mut seen = vec![TaskState::Submitted];
            for i in seq {
                r.apply(vec![notice(TaskState::ALL[i])]);
                seen.push(r.lock().tasks["t"].state);
            }
            prop_assert!(seen.windows(2).all(|w| w[0] <= w[1]));
            let live = r.lock().live;
            prop_assert_eq!(live, usize::from(!seen.last().unwrap().is_terminal()));
        }
    }
}
