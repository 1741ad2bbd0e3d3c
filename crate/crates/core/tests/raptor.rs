use std::collections::HashSet;
use std::time::Duration;

use pilotkit::analytics::{concurrency_and_rate_series, load_session_traces, SeriesSource};
use pilotkit::client::{PilotManager, Session, TaskManager};
use pilotkit::config::SessionConfig;
use pilotkit::pilot::PilotDescription;
use pilotkit::raptor::{launch_master, FunctionCall, MasterConfig, RaptorError};

fn local(cores: u32) -> PilotDescription {
    let mut pd = PilotDescription::local("p", cores);
    pd.oversubscribe = true;
    pd
}

#[test]
fn calls_return_exactly_once() {
    let root = tempfile::tempdir().unwrap();
    let s = Session::create(root.path(), SessionConfig::default()).unwrap();
    let p = PilotManager::new(&s).submit_pilot(local(5)).unwrap();
    let tm = TaskManager::new(&s);
    tm.add_pilot(&p);
    let mut m = launch_master(&tm, "m0", MasterConfig::new(2, 2)).unwrap();
    let calls: Vec<_> = (0..5000)
        .map(|i| FunctionCall::new(format!("c{i}"), "arith", format!("{i} + 1")))
        .collect();
    let res = m.dispatch_calls(calls, Some(Duration::from_secs(60))).unwrap();
    assert_eq!(res.len(), 5000);
    let uids: HashSet<_> = res.iter().map(|r| r.call_uid.clone()).collect();
    assert_eq!(uids.len(), 5000);
    let r7 = res.iter().find(|r| r.call_uid == "c7").unwrap();
    assert_eq!(r7.output, b"8");
    m.stop().unwrap();
    tm.wait_tasks(&[m.task().clone()], Some(Duration::from_secs(30))).unwrap();
    s.close();
    let t = load_session_traces(s.dir()).unwrap();
    let (conc, rate) = concurrency_and_rate_series(&t, SeriesSource::Calls, 0.05);
    assert!((rate.integral() - 5000.0).abs() < 1e-6);
    assert!(conc.max() <= 4.0 + 1e-9);
}

#[test]
fn capacity_is_checked() {
    let root = tempfile::tempdir().unwrap();
    let s = Session::create(root.path(), SessionConfig::default()).unwrap();
    let p = PilotManager::new(&s).submit_pilot(local(4)).unwrap();
    let tm = TaskManager::new(&s);
    tm.add_pilot(&p);
    let err = launch_master(&tm, "m0", MasterConfig::new(2, 2)).err().unwrap();
    assert_eq!(err.to_string(), RaptorError::CapacityExceeded { needed: 5, available: 4 }.to_string());
    launch_master(&tm, "m1", MasterConfig::new(1, 3)).unwrap();
    assert!(matches!(
        launch_master(&tm, "m2", MasterConfig::new(1, 1)),
        Err(RaptorError::CapacityExceeded { available: 0, .. })
    ));
    s.close();
}

#[test]
fn lost_worker_calls_are_redispatched() {
    let root = tempfile::tempdir().unwrap();
    let s = Session::create(root.path(), SessionConfig::default()).unwrap();
    let p = PilotManager::new(&s).submit_pilot(local(3)).unwrap();
    let tm = TaskManager::new(&s);
    tm.add_pilot(&p);
    let mut cfg = MasterConfig::new(2, 1);
    cfg.worker_timeout_s = 0.5;
    let mut m = launch_master(&tm, "m0", cfg).unwrap();
    let calls: Vec<_> = (0..40).map(|i| FunctionCall::new(format!("c{i}"), "sleep", "0.02")).collect();
    m.submit(calls).unwrap();
    std::thread::sleep(Duration::from_millis(150));
    // kill one worker mid-run
    tm.cancel_tasks(&[m.worker_uids()[0].clone()]);
    let mut got = HashSet::new();
    let deadline = std::time::Instant::now() + Duration::from_secs(30);
    while got.len() < 40 && std::time::Instant::now() < deadline {
        for r in m.collect(64, Duration::from_millis(20)).unwrap() {
            assert!(r.is_ok(), "{r:?}");
            got.insert(r.call_uid);
        }
    }
    assert_eq!(got.len(), 40);
    m.stop().unwrap();
    s.close();
    let t = load_session_traces(s.dir()).unwrap();
    assert!(t.events.iter().any(|e| e.event_name == "worker_lost"));
}

#[test]
fn timed_calls_keep_every_worker_busy() {
    let root = tempfile::tempdir().unwrap();
    let s = Session::create(root.path(), SessionConfig::default()).unwrap();
    let p = PilotManager::new(&s).submit_pilot(local(5)).unwrap();
    let tm = TaskManager::new(&s);
    tm.add_pilot(&p);
    let mut cfg = MasterConfig::new(4, 1);
    cfg.prefetch_per_core = 4;
    let mut m = launch_master(&tm, "m0", cfg).unwrap();
    let calls: Vec<_> = (0..400).map(|i| FunctionCall::new(format!("c{i}"), "sleep", "0.005")).collect();
    let res = m.dispatch_calls(calls, Some(Duration::from_secs(60))).unwrap();
    assert_eq!(res.len(), 400);
    let mut per: std::collections::BTreeMap<String, usize> = Default::default();
    for r in &res {
        *per.entry(r.worker.clone()).or_default() += 1;
    }
    assert_eq!(per.len(), 4, "{per:?}");
    assert!(per.values().all(|&n| n >= 50), "{per:?}");
    m.stop().unwrap();
    tm.wait_tasks(&[m.task().clone()], Some(Duration::from_secs(30))).unwrap();
    s.close();
}
