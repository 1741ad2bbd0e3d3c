use std::time::Duration;

use pilotkit::client::{PilotManager, Session, TaskManager};
use pilotkit::config::SessionConfig;
use pilotkit::pilot::PilotDescription;
use pilotkit::task::{TaskDescription, TaskState};

#[test]
fn simulated_tasks_finish() {
    let dir = tempfile::tempdir().unwrap();
    let s = Session::create(dir.path(), SessionConfig::default()).unwrap();
    let pm = PilotManager::new(&s);
    let p = pm.submit_pilot(PilotDescription::simulated("p0", 4, 8, 0)).unwrap();
    let tm = TaskManager::new(&s);
    tm.add_pilot(&p);
    let tds = (0..100)
        .map(|i| TaskDescription::executable(format!("t{i}"), "pilotkit-emulate").with_args(["--duration", "10"]))
        .collect();
    let hs: Vec<_> = tm.submit_tasks(tds).into_iter().map(Result::unwrap).collect();
    let infos = tm.wait_tasks(&hs, Some(Duration::from_secs(30))).unwrap();
    assert!(infos.iter().all(|i| i.state == TaskState::Done), "{infos:?}");
    s.close();
}

#[test]
fn local_functions_finish() {
    let dir = tempfile::tempdir().unwrap();
    let s = Session::create(dir.path(), SessionConfig::default()).unwrap();
    let pm = PilotManager::new(&s);
    let mut pd = PilotDescription::local("p0", 4);
    pd.oversubscribe = true;
    let p = pm.submit_pilot(pd).unwrap();
    let tm = TaskManager::new(&s);
    tm.add_pilot(&p);
    let tds = (0..20)
        .map(|i| TaskDescription::function(format!("t{i}"), "arith").with_args([format!("{i} * 2")]))
        .collect();
    let hs: Vec<_> = tm.submit_tasks(tds).into_iter().map(Result::unwrap).collect();
    let infos = tm.wait_tasks(&hs, Some(Duration::from_secs(30))).unwrap();
    assert!(infos.iter().all(|i| i.state == TaskState::Done), "{infos:?}");
    s.close();
}

#[test]
fn tcp_transport_gives_same_outcome() {
    use pilotkit::bus::Transport;
    let go = |cfg: SessionConfig| {
        let dir = tempfile::tempdir().unwrap();
        let s = Session::create(dir.path(), cfg.with_seed(3)).unwrap();
        let p = PilotManager::new(&s).submit_pilot(PilotDescription::simulated("p0", 2, 4, 0)).unwrap();
        let tm = TaskManager::new(&s);
        tm.add_pilot(&p);
        let tds = (0..40)
            .map(|i| TaskDescription::executable(format!("t{i:02}"), "pilotkit-emulate").with_args(["--duration", "2"]))
            .collect();
        let hs: Vec<_> = tm.submit_tasks(tds).into_iter().map(Result::unwrap).collect();
        let infos = tm.wait_tasks(&hs, Some(Duration::from_secs(60))).unwrap();
        s.close();
        let t = pilotkit::analytics::load_session_traces(s.dir()).unwrap();
        let ttx = pilotkit::analytics::compute_ttx(&t, None).unwrap();
        let states: Vec<_> = infos.into_iter().map(|i| (i.uid, i.state)).collect();
        (states, ttx)
    };
    let a = go(SessionConfig::default());
    let b = go(SessionConfig::default().with_transport(Transport::Tcp("127.0.0.1:0".into())));
    assert_eq!(a, b);
    assert!(a.0.iter().all(|(_, s)| *s == TaskState::Done));
}
