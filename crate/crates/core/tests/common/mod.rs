#![allow(dead_code)]

pub mod oracle;

use std::path::PathBuf;
use std::time::Duration;

use pilotkit::analytics::{load_session_traces, Trace};
use pilotkit::client::{PilotManager, Session, TaskManager, TaskInfo};
use pilotkit::config::SessionConfig;
use pilotkit::pilot::PilotDescription;
use pilotkit::task::TaskDescription;

pub struct Run {
    pub _root: tempfile::TempDir,
    pub dir: PathBuf,
    pub infos: Vec<TaskInfo>,
}

impl Run {
    pub fn trace(&self) -> Trace {
        load_session_traces(&self.dir).unwrap()
    }
}

pub fn run(pd: PilotDescription, tds: Vec<TaskDescription>, cfg: SessionConfig) -> Run {
    let root = tempfile::tempdir().unwrap();
    let s = Session::create(root.path(), cfg).unwrap();
    let p = PilotManager::new(&s).submit_pilot(pd).unwrap();
    let tm = TaskManager::new(&s);
    tm.add_pilot(&p);
    let hs: Vec<_> = tm.submit_tasks(tds).into_iter().map(Result::unwrap).collect();
    let infos = tm.wait_tasks(&hs, Some(Duration::from_secs(120))).unwrap();
    s.close();
    Run {
        dir: s.dir().to_path_buf(),
        _root: root,
        infos,
    }
}

pub fn sim(pd: PilotDescription, tds: Vec<TaskDescription>) -> Run {
    run(pd, tds, SessionConfig::default())
}

pub fn sleeps(n: usize, secs: f64) -> Vec<TaskDescription> {
    (0..n)
        .map(|i| TaskDescription::executable(format!("t{i:05}"), "pilotkit-emulate").with_args(["--duration".to_string(), secs.to_string()]))
        .collect()
}
