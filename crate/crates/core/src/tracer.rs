//! Buffered per-component event traces and the session manifest.
//!
//! Each component owns one [`Tracer`] and writes one CSV file under
//! `<session>/traces/`. Lines look like
//! `timestamp,component,event_name,task_uid,detail` with the timestamp in
//! decimal seconds and six fractional digits. Tracing never fails a task:
//! write errors are logged and counted, and the affected component is marked
//! partial in the manifest.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::pilot::PilotDescription;
use crate::time::Micros;

/// Event names understood by the analytics.
pub mod names {
    pub const SESSION_START: &str = "session_start";
    pub const SESSION_CLOSE: &str = "session_close";
    pub const PILOT_START: &str = "pilot_start";
    pub const AGENT_READY: &str = "agent_ready";
    pub const AGENT_STOP: &str = "agent_stop";
    pub const WALLTIME_EXCEEDED: &str = "walltime_exceeded";
    pub const DVM_READY: &str = "dvm_ready";
    pub const DVM_FAILED: &str = "dvm_failed";
    pub const DVM_STOP: &str = "dvm_stop";
    pub const TASK_SUBMIT: &str = "task_submit";
    pub const DB_BRIDGE_PULL: &str = "db_bridge_pull";
    pub const STAGE_IN_START: &str = "stage_in_start";
    pub const STAGE_IN_STOP: &str = "stage_in_stop";
    pub const SCHEDULE_OK: &str = "schedule_ok";
    pub const SCHEDULE_WAIT: &str = "schedule_wait";
    pub const PREPARE_START: &str = "prepare_start";
    pub const EXEC_START: &str = "exec_start";
    pub const EXEC_STOP: &str = "exec_stop";
    pub const SPAWN_RETURN: &str = "spawn_return";
    pub const STAGE_OUT_START: &str = "stage_out_start";
    pub const STAGE_OUT_STOP: &str = "stage_out_stop";
    pub const TASK_STATE: &str = "task_state";
    pub const TASK_REQUEUE: &str = "task_requeue";
    pub const CANCEL_REQUEST: &str = "cancel_request";
    pub const MASTER_START: &str = "master_start";
    pub const MASTER_STOP: &str = "master_stop";
    pub const WORKER_REGISTER: &str = "worker_register";
    pub const WORKER_LOST: &str = "worker_lost";
    pub const CALL_START: &str = "call_start";
    pub const CALL_STOP: &str = "call_stop";
    pub const CALL_REDISPATCH: &str = "call_redispatch";

    pub const ALL: &[&str] = &[
        SESSION_START,
        SESSION_CLOSE,
        PILOT_START,
        AGENT_READY,
        AGENT_STOP,
        WALLTIME_EXCEEDED,
        DVM_READY,
        DVM_FAILED,
        DVM_STOP,
        TASK_SUBMIT,
        DB_BRIDGE_PULL,
        STAGE_IN_START,
        STAGE_IN_STOP,
        SCHEDULE_OK,
        SCHEDULE_WAIT,
        PREPARE_START,
        EXEC_START,
        EXEC_STOP,
        SPAWN_RETURN,
        STAGE_OUT_START,
        STAGE_OUT_STOP,
        TASK_STATE,
        TASK_REQUEUE,
        CANCEL_REQUEST,
        MASTER_START,
        MASTER_STOP,
        WORKER_REGISTER,
        WORKER_LOST,
        CALL_START,
        CALL_STOP,
        CALL_REDISPATCH,
    ];

    /// The registered static name equal to `name`, if any.
    pub fn lookup(name: &str) -> Option<&'static str> {
        ALL.iter().copied().find(|n| *n == name)
    }
}

/// One trace line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub timestamp: Micros,
    pub component: String,
    pub event_name: String,
    pub task_uid: Option<String>,
    pub detail: Option<String>,
}

pub const DEFAULT_BUFFER: usize = 4096;
pub const CSV_HEADER: [&str; 5] = ["timestamp", "component", "event_name", "task_uid", "detail"];

/// Per-component bookkeeping reported in the manifest.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ComponentRecord {
    pub name: String,
    pub file: String,
    pub events: u64,
    pub rejected: u64,
    pub io_errors: u64,
    pub clock_offset_s: f64,
    pub partial: bool,
    #[serde(skip)]
    pub(crate) open: bool,
}

/// Shared factory for the tracers of one session.
#[derive(Debug)]
pub struct TraceSink {
    dir: Option<PathBuf>,
    buffer_size: usize,
    components: Mutex<BTreeMap<String, ComponentRecord>>,
}

impl TraceSink {
    /// Traces written to `dir`, flushed every `buffer_size` events.
    pub fn new(dir: impl Into<PathBuf>, buffer_size: usize) -> Arc<Self> {
        Arc::new(TraceSink {
            dir: Some(dir.into()),
            buffer_size: buffer_size.max(1),
            components: Mutex::new(BTreeMap::new()),
        })
    }

    pub fn disabled() -> Arc<Self> {
        Arc::new(TraceSink {
            dir: None,
            buffer_size: DEFAULT_BUFFER,
            components: Mutex::new(BTreeMap::new()),
        })
    }

    pub fn enabled(&self) -> bool {
        self.dir.is_some()
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn tracer(self: &Arc<Self>, component: impl Into<String>) -> Tracer {
        let component = component.into();
        Tracer {
            sink: self.enabled().then(|| Arc::clone(self)),
            component,
            buffer: Vec::with_capacity(if self.enabled() { self.buffer_size.min(DEFAULT_BUFFER) } else { 0 }),
            writer: None,
            registered: false,
            last: None,
            events: 0,
            rejected: 0,
            io_errors: 0,
        }
    }

    /// Records of every component that emitted at least once.
    pub fn components(&self) -> Vec<ComponentRecord> {
        let map = self.components.lock().unwrap_or_else(|e| e.into_inner());
        map.values()
            .cloned()
            .map(|mut r| {
                r.partial = r.partial || r.open || r.io_errors > 0;
                r
            })
            .collect()
    }

    fn register(&self, component: &str) -> bool {
        let mut map = self.components.lock().unwrap_or_else(|e| e.into_inner());
        if map.contains_key(component) {
            log::warn!("trace component {component} registered twice; second tracer is disabled");
            return false;
        }
        map.insert(
            component.to_string(),
            ComponentRecord {
                name: component.to_string(),
                file: format!("{}.csv", file_stem(component)),
                open: true,
                ..ComponentRecord::default()
            },
        );
        true
    }

    fn update(&self, t: &Tracer, open: bool) {
        let mut map = self.components.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(r) = map.get_mut(&t.component) {
            r.events = t.events;
            r.rejected = t.rejected;
            r.io_errors = t.io_errors;
            r.open = open;
        }
    }
}

fn file_stem(component: &str) -> String {
    component
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_') { c } else { '_' })
        .collect()
}

struct Pending {
    ts: Micros,
    name: &'static str,
    uid: Option<String>,
    detail: Option<String>,
}

/// Event recorder owned by one component context.
pub struct Tracer {
    sink: Option<Arc<TraceSink>>,
    component: String,
    buffer: Vec<Pending>,
    writer: Option<csv::Writer<BufWriter<File>>>,
    registered: bool,
    last: Option<Micros>,
    events: u64,
    rejected: u64,
    io_errors: u64,
}

impl std::fmt::Debug for Tracer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tracer")
            .field("component", &self.component)
            .field("events", &self.events)
            .field("rejected", &self.rejected)
            .finish()
    }
}

impl Tracer {
    /// A tracer that drops everything but still checks ordering.
    pub fn disabled(component: impl Into<String>) -> Tracer {
        TraceSink::disabled().tracer(component)
    }

    pub fn component(&self) -> &str {
        &self.component
    }

    pub fn is_enabled(&self) -> bool {
        self.sink.is_some()
    }

    pub fn events(&self) -> u64 {
        self.events
    }

    pub fn rejected(&self) -> u64 {
        self.rejected
    }

    pub fn io_errors(&self) -> u64 {
        self.io_errors
    }

    /// Records an event. Returns false if it was rejected: unknown name or a
    /// timestamp older than the previous one.
    pub fn emit(
        &mut self,
        ts: Micros,
        name: &str,
        task_uid: Option<&str>,
        detail: Option<&str>,
    ) -> bool {
        let Some(name) = names::lookup(name) else {
            self.rejected += 1;
            log::warn!("{}: unregistered event name {name:?}", self.component);
            return false;
        };
        if matches!(self.last, Some(last) if ts < last) {
            self.rejected += 1;
            log::warn!("{}: out-of-order event {name} at {ts}", self.component);
            return false;
        }
        self.last = Some(ts);
        self.events += 1;
        let Some(sink) = &self.sink else {
            return true;
        };
        if !self.registered {
            if !sink.register(&self.component) {
                self.sink = None;
                return true;
            }
            self.registered = true;
        }
        self.buffer.push(Pending {
            ts,
            name,
            uid: task_uid.map(str::to_owned),
            detail: detail.map(str::to_owned),
        });
        if self.buffer.len() >= sink.buffer_size {
            self.flush();
        }
        true
    }

    pub fn emit_event(&mut self, e: &Event) -> bool {
        self.emit(e.timestamp, &e.event_name, e.task_uid.as_deref(), e.detail.as_deref())
    }

    /// Writes buffered events to the component file.
    pub fn flush(&mut self) {
        let Some(sink) = self.sink.clone() else {
            return;
        };
        if self.buffer.is_empty() && self.writer.is_some() {
            return;
        }
        if let Err(e) = self.write_buffer(&sink) {
            log::error!("{}: trace write failed: {e}", self.component);
            self.io_errors += self.buffer.len().max(1) as u64;
        }
        self.buffer.clear();
        sink.update(self, true);
    }

    fn write_buffer(&mut self, sink: &TraceSink) -> std::io::Result<()> {
        if self.writer.is_none() {
            let dir = sink.dir().expect("enabled sink has a dir");
            std::fs::create_dir_all(dir)?;
            let file = File::create(dir.join(format!("{}.csv", file_stem(&self.component))))?;
            let mut w = csv::WriterBuilder::new()
                .has_headers(false)
                .from_writer(BufWriter::with_capacity(1 << 16, file));
            w.write_record(CSV_HEADER)?;
            self.writer = Some(w);
        }
        let w = self.writer.as_mut().expect("writer opened above");
        let mut ts = String::with_capacity(24);
        for p in &self.buffer {
            ts.clear();
            use std::fmt::Write as _;
            let _ = write!(ts, "{}", p.ts);
            w.write_record([
                ts.as_str(),
                self.component.as_str(),
                p.name,
                p.uid.as_deref().unwrap_or(""),
                p.detail.as_deref().unwrap_or(""),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Flushes and releases the file.
    pub fn close(mut self) {
        self.finish();
    }

    fn finish(&mut self) {
        if self.sink.is_none() {
            return;
        }
        if self.registered {
            self.flush();
            if let Some(mut w) = self.writer.take() {
                if let Err(e) = w.flush() {
                    log::error!("{}: trace close failed: {e}", self.component);
                    self.io_errors += 1;
                }
                match w.into_inner() {
                    Ok(mut b) => {
                        if b.flush().is_err() {
                            self.io_errors += 1;
                        }
                    }
                    Err(_) => self.io_errors += 1,
                }
            }
            if let Some(sink) = &self.sink {
                sink.update(self, false);
            }
        }
        self.sink = None;
    }
}

impl Drop for Tracer {
    fn drop(&mut self) {
        self.finish();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockKind {
    Wall,
    Virtual,
}

/// Contents of `<session>/manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub session_uid: String,
    pub seed: u64,
    pub clock: ClockKind,
    pub components: Vec<ComponentRecord>,
    #[serde(default)]
    pub pilots: Vec<PilotDescription>,
    #[serde(default)]
    pub config: serde_json::Value,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRACE_DIR: &str = "traces";

impl Manifest {
    pub fn write(&self, session_dir: &Path) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(session_dir.join(MANIFEST_FILE), text)
    }

    pub fn read(session_dir: &Path) -> std::io::Result<Manifest> {
        let text = std::fs::read_to_string(session_dir.join(MANIFEST_FILE))?;
        serde_json::from_str(&text).map_err(std::io::Error::other)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn read(dir: &Path, component: &str) -> String {
        std::fs::read_to_string(dir.join(format!("{component}.csv"))).unwrap()
    }

    #[test]
    fn emit_then_close_writes_file() {
        let dir = tempfile::tempdir().unwrap();
        let sink = TraceSink::new(dir.path(), DEFAULT_BUFFER);
        let mut t = sink.tracer("p.sched");
        assert!(t.emit(Micros(1_500_000), names::SCHEDULE_OK, Some("t1"), Some("0:0-1/")));
        t.close();
        let text = read(dir.path(), "p.sched");
        assert_eq!(
            text,
            "timestamp,component,event_name,task_uid,detail\n1.500000,p.sched,schedule_ok,t1,0:0-1/\n"
        );
        let comps = sink.components();
        assert_eq!(comps.len(), 1);
        assert_eq!(comps[0].events, 1);
        assert!(!comps[0].partial);
    }

    #[test]
    fn out_of_order_and_unknown_are_rejected() {
        let mut t = Tracer::disabled("x");
        assert!(t.emit(Micros(5), names::EXEC_START, None, None));
        assert!(!t.emit(Micros(4), names::EXEC_STOP, None, None));
        assert!(!t.emit(Micros(6), "bogus", None, None));
        assert!(t.emit(Micros(5), names::EXEC_STOP, None, None));
        assert_eq!(t.rejected(), 2);
        assert_eq!(t.events(), 2);
    }

    #[test]
    fn buffer_size_does_not_change_content() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        for (dir, size) in [(a.path(), 1), (b.path(), 4096)] {
            let sink = TraceSink::new(dir, size);
            let mut t = sink.tracer("c");
            for i in 0..10_000 {
                t.emit(Micros(i), names::TASK_STATE, Some(&format!("t{i}")), Some("a,b\"c"));
            }
        }
        assert_eq!(read(a.path(), "c"), read(b.path(), "c"));
    }

    #[test]
    fn unopened_tracers_are_not_listed() {
        let dir = tempfile::tempdir().unwrap();
        let sink = TraceSink::new(dir.path(), 16);
        drop(sink.tracer("quiet"));
        assert!(sink.components().is_empty());
    }

    #[test]
    fn live_tracer_is_partial() {
        let dir = tempfile::tempdir().unwrap();
        let sink = TraceSink::new(dir.path(), 16);
        let mut t = sink.tracer("busy");
        t.emit(Micros(0), names::AGENT_READY, None, None);
        assert!(sink.components()[0].partial);
        drop(t);
        assert!(!sink.components()[0].partial);
    }

    #[test]
    fn unwritable_dir_counts_io_errors() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        std::fs::write(&blocker, "x").unwrap();
        let sink = TraceSink::new(blocker.join("traces"), 2);
        let mut t = sink.tracer("c");
        for i in 0..4 {
            t.emit(Micros(i), names::TASK_STATE, None, None);
        }
        drop(t);
        let rec = &sink.components()[0];
        assert!(rec.io_errors > 0);
        assert!(rec.partial);
    }

    #[test]
    fn registry_is_documented_and_unique() {
        let mut all = names::ALL.to_vec();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), names::ALL.len());
        assert!(names::ALL.len() >= 25);
    }
}
