use std::path::Path;

use super::AnalyticsError;
use crate::pilot::PilotDescription;
use crate::time::Micros;
use crate::tracer::{Event, Manifest, MANIFEST_FILE, TRACE_DIR};

/// A line that could not be parsed. It is skipped and counted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorruptLine {
    pub file: String,
    pub line: u64,
    pub reason: String,
}

/// All events of a session on one timeline.
#[derive(Debug, Clone)]
pub struct Trace {
    pub manifest: Manifest,
    /// Ordered by timestamp; ties keep manifest component order, then file
    /// order.
    pub events: Vec<Event>,
    pub corrupt: Vec<CorruptLine>,
}

impl Trace {
    pub fn from_events(manifest: Manifest, mut events: Vec<Event>) -> Trace {
        events.sort_by_key(|e| e.timestamp);
        Trace {
            manifest,
            events,
            corrupt: Vec::new(),
        }
    }

    pub fn pilot(&self, uid: &str) -> Option<&PilotDescription> {
        self.manifest.pilots.iter().find(|p| p.uid == uid)
    }

    /// The pilot a component belongs to: the longest pilot uid that
    /// prefixes `<uid>.`.
    pub fn pilot_of(&self, component: &str) -> Option<&str> {
        self.manifest
            .pilots
            .iter()
            .map(|p| p.uid.as_str())
            .filter(|p| component.len() > p.len() && component.starts_with(p) && component.as_bytes()[p.len()] == b'.')
            .max_by_key(|p| p.len())
    }

    /// Events from the components of one pilot.
    pub fn for_pilot<'a>(&'a self, uid: &'a str) -> impl Iterator<Item = &'a Event> + 'a {
        self.events.iter().filter(move |e| self.pilot_of(&e.component) == Some(uid))
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> AnalyticsError {
    AnalyticsError::Io {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

/// Reads the manifest and every component file it lists, applies the
/// recorded clock offsets and merges the events into one timeline.
pub fn load_session_traces(dir: &Path) -> Result<Trace, AnalyticsError> {
    let mpath = dir.join(MANIFEST_FILE);
    if !mpath.is_file() {
        return Err(AnalyticsError::ManifestMissing(dir.to_path_buf()));
    }
    let manifest = Manifest::read(dir).map_err(|e| io_err(&mpath, e))?;
    let mut events = Vec::new();
    let mut corrupt = Vec::new();
    for comp in &manifest.components {
        let path = dir.join(TRACE_DIR).join(&comp.file);
        let file = match std::fs::File::open(&path) {
            Ok(f) => f,
            Err(e) => {
                log::warn!("{}: {e}", path.display());
                corrupt.push(CorruptLine {
                    file: comp.file.clone(),
                    line: 0,
                    reason: format!("unreadable: {e}"),
                });
                continue;
            }
        };
        let offset = Micros::from_secs_f64(comp.clock_offset_s);
        let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(file);
        for rec in rdr.records() {
            let bad = |line: u64, reason: String| CorruptLine {
                file: comp.file.clone(),
                line,
                reason,
            };
            let rec = match rec {
                Ok(r) => r,
                Err(e) => {
                    let line = e.position().map_or(0, |p| p.line());
                    corrupt.push(bad(line, e.to_string()));
                    continue;
                }
            };
            let line = rec.position().map_or(0, |p| p.line());
            if rec.len() != 5 {
                corrupt.push(bad(line, format!("{} fields", rec.len())));
                continue;
            }
            let Some(ts) = Micros::parse_decimal(&rec[0]) else {
                corrupt.push(bad(line, format!("bad timestamp {:?}", &rec[0])));
                continue;
            };
            let opt = |s: &str| (!s.is_empty()).then(|| s.to_string());
            events.push(Event {
                timestamp: ts + offset,
                component: rec[1].to_string(),
                event_name: rec[2].to_string(),
                task_uid: opt(&rec[3]),
                detail: opt(&rec[4]),
            });
        }
    }
    for c in &corrupt {
        log::warn!("{}:{}: skipped: {}", c.file, c.line, c.reason);
    }
    let mut trace = Trace::from_events(manifest, events);
    trace.corrupt = corrupt;
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tracer::{ClockKind, ComponentRecord};

    fn manifest(components: &[(&str, f64)]) -> Manifest {
        Manifest {
            session_uid: "s".into(),
            seed: 0,
            clock: ClockKind::Virtual,
            components: components
                .iter()
                .map(|(n, o)| ComponentRecord {
                    name: n.to_string(),
                    file: format!("{n}.csv"),
                    clock_offset_s: *o,
                    ..Default::default()
                })
                .collect(),
            pilots: vec![],
            config: serde_json::Value::Null,
        }
    }

    fn write(dir: &Path, m: &Manifest, files: &[(&str, &str)]) {
        std::fs::create_dir_all(dir.join(TRACE_DIR)).unwrap();
        m.write(dir).unwrap();
        for (name, body) in files {
            std::fs::write(dir.join(TRACE_DIR).join(format!("{name}.csv")), body).unwrap();
        }
    }

    const HEAD: &str = "timestamp,component,event_name,task_uid,detail\n";

    #[test]
    fn offsets_merge_timeline() {
        let dir = tempfile::tempdir().unwrap();
        let m = manifest(&[("a", 0.5), ("b", -0.5)]);
        write(
            dir.path(),
            &m,
            &[
                ("a", &format!("{HEAD}1.000000,a,exec_start,t,\n")),
                ("b", &format!("{HEAD}1.200000,b,exec_stop,t,\n")),
            ],
        );
        let t = load_session_traces(dir.path()).unwrap();
        let ts: Vec<_> = t.events.iter().map(|e| (e.component.as_str(), e.timestamp)).collect();
        assert_eq!(ts, vec![("b", Micros(700_000)), ("a", Micros(1_500_000))]);
    }

    #[test]
    fn corrupt_line_is_counted() {
        let dir = tempfile::tempdir().unwrap();
        let m = manifest(&[("a", 0.0)]);
        write(
            dir.path(),
            &m,
            &[("a", &format!("{HEAD}1.0,a,exec_start,t,\nnot-a-time,a,exec_stop,t,\n2.0,a,exec_stop,t,\n"))],
        );
        let t = load_session_traces(dir.path()).unwrap();
        assert_eq!(t.events.len(), 2);
        assert_eq!(t.corrupt.len(), 1);
        assert_eq!(t.corrupt[0].line, 3);
    }

    #[test]
    fn empty_dir_has_no_manifest() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_session_traces(dir.path()),
            Err(AnalyticsError::ManifestMissing(_))
        ));
    }
}
