use std::collections::BTreeMap;

use super::Trace;
use crate::scheduler::Placement;
use crate::time::Micros;
use crate::tracer::{names, Event};

/// One placement of a task, from `schedule_ok` until its slots were freed.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Attempt {
    pub placement: Option<Placement>,
    pub scheduled: Micros,
    pub prepare_start: Option<Micros>,
    pub exec_start: Option<Micros>,
    pub exec_stop: Option<Micros>,
    pub spawn_return: Option<Micros>,
    /// When the attempt ended without a spawn return: requeue, cancel,
    /// failure.
    pub aborted: Option<Micros>,
}

impl Attempt {
    /// When the slots were given back, if the trace says so.
    pub fn end(&self) -> Option<Micros> {
        self.spawn_return.or(self.aborted)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TaskTimeline {
    pub uid: String,
    pub pulled: Option<Micros>,
    pub cores: u32,
    pub gpus: u32,
    pub mpi: bool,
    pub attempts: Vec<Attempt>,
    pub terminal: Option<(String, Micros)>,
    pub requeues: u32,
}

/// Ordering of same-instant events of one task. Events can share a
/// timestamp on a virtual clock while coming from different components.
fn rank(e: &Event) -> u8 {
    match e.event_name.as_str() {
        names::TASK_SUBMIT => 0,
        names::DB_BRIDGE_PULL => 1,
        names::STAGE_IN_START => 2,
        names::STAGE_IN_STOP => 3,
        names::TASK_REQUEUE => 4,
        names::SCHEDULE_WAIT => 5,
        names::SCHEDULE_OK => 6,
        names::PREPARE_START => 7,
        names::EXEC_START => 8,
        names::EXEC_STOP => 9,
        names::SPAWN_RETURN => 10,
        names::STAGE_OUT_START => 11,
        names::STAGE_OUT_STOP => 12,
        _ => 13,
    }
}

fn parse_shape(s: &str) -> Option<(u32, u32, bool)> {
    let (c, rest) = s.split_once('c')?;
    let (g, m) = rest.split_once('g')?;
    Some((c.parse().ok()?, g.parse().ok()?, m == "m"))
}

fn is_task_event(name: &str) -> bool {
    !matches!(
        name,
        names::CALL_START | names::CALL_STOP | names::CALL_REDISPATCH | names::WORKER_LOST | names::WORKER_REGISTER
    )
}

/// Per-task timelines built from the events of `pilot`.
pub fn task_timelines(trace: &Trace, pilot: &str) -> BTreeMap<String, TaskTimeline> {
    let mut by_uid: BTreeMap<&str, Vec<&Event>> = BTreeMap::new();
    for e in trace.for_pilot(pilot) {
        if let Some(uid) = e.task_uid.as_deref() {
            if is_task_event(&e.event_name) {
                by_uid.entry(uid).or_default().push(e);
            }
        }
    }
    let mut out = BTreeMap::new();
    for (uid, mut evs) in by_uid {
        evs.sort_by_key(|e| (e.timestamp, rank(e)));
        let mut tl = TaskTimeline {
            uid: uid.to_string(),
            ..Default::default()
        };
        for e in evs {
            let ts = e.timestamp;
            let open = tl.attempts.last_mut().filter(|a| a.end().is_none());
            match e.event_name.as_str() {
                names::DB_BRIDGE_PULL => {
                    tl.pulled.get_or_insert(ts);
                    if let Some((c, g, m)) = e.detail.as_deref().and_then(parse_shape) {
                        (tl.cores, tl.gpus, tl.mpi) = (c, g, m);
                    }
                }
                names::SCHEDULE_OK => {
                    if let Some(a) = open {
                        a.aborted = Some(ts);
                    }
                    tl.attempts.push(Attempt {
                        placement: e.detail.as_deref().and_then(|d| Placement::decode(uid, d)),
                        scheduled: ts,
                        ..Default::default()
                    });
                }
                names::PREPARE_START => {
                    if let Some(a) = open {
                        a.prepare_start.get_or_insert(ts);
                    }
                }
                names::EXEC_START => {
                    if let Some(a) = open {
                        a.exec_start.get_or_insert(ts);
                    }
                }
                names::EXEC_STOP => {
                    if let Some(a) = open {
                        a.exec_stop.get_or_insert(ts);
                    }
                }
                names::SPAWN_RETURN => {
                    if let Some(a) = open {
                        a.spawn_return = Some(ts);
                    }
                }
                names::TASK_REQUEUE => {
                    tl.requeues += 1;
                    if let Some(a) = open {
                        a.aborted = Some(ts);
                    }
                }
                names::TASK_STATE => {
                    let state = e.detail.as_deref().unwrap_or("");
                    if matches!(state, "DONE" | "FAILED" | "CANCELED") {
                        if let Some(a) = open {
                            a.aborted = Some(ts);
                        }
                        tl.terminal = Some((state.to_string(), ts));
                    }
                }
                _ => {}
            }
        }
        out.insert(uid.to_string(), tl);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_parses() {
        assert_eq!(parse_shape("4c1gm"), Some((4, 1, true)));
        assert_eq!(parse_shape("32c0g"), Some((32, 0, false)));
        assert_eq!(parse_shape("x"), None);
    }
}
