mod common;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::time::Duration;

use proptest::prelude::*;

use common::oracle::check_instance;
use common::{run, sim, sleeps};
use pilotkit::analytics::{compute_ttx, compute_utilization, latency_stats, replay_placements, task_timelines};
use pilotkit::bus::{Bus, ChannelKind, Transport};
use pilotkit::client::{PilotManager, Session, TaskManager};
use pilotkit::config::SessionConfig;
use pilotkit::executor::{partition_dvms, DvmSelector, DvmState};
use pilotkit::pilot::{build_node_list, DvmPolicy, LatencyModel, PilotDescription};
use pilotkit::scheduler::{Admission, Placement, Scheduler, SlotMap};
use pilotkit::task::{validate_task_description, Task, TaskDescription, TaskState};
use pilotkit::time::Micros;
use pilotkit::tracer::{names, Tracer};

fn cfg(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

proptest! {
    #![proptest_config(cfg(256))]

    #[test]
    fn continuous_matches_oracle(seed in any::<u64>()) {
        check_instance(seed).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn random_walks_end_terminal_in_order(stage_in in any::<bool>(), stage_out in any::<bool>(), picks in prop::collection::vec(0usize..8, 12)) {
        let mut td = TaskDescription::executable("t", "x");
        if stage_in {
            td.stage_in.push(pilotkit::task::StagingDirective::new("a", "b"));
        }
        if stage_out {
            td.stage_out.push(pilotkit::task::StagingDirective::new("a", "b"));
        }
        let mut task = Task::new(td);
        let mut tr = Tracer::disabled("x");
        let mut seen = vec![task.state];
        let mut legal_steps = 0;
        let mut t = 0;
        for p in picks.iter().cycle() {
            if task.state.is_terminal() {
                break;
            }
            let next = task.state.successors(stage_in, stage_out);
            let n = next[p % next.len()];
            if n == TaskState::Executing || n == TaskState::Scheduled {
                task.placement = Some(Placement { task_uid: "t".into(), assignments: vec![], dvm_id: None });
            }
            t += 1;
            task.advance(n, Micros(t), &mut tr).map_err(|e| TestCaseError::fail(e.to_string()))?;
            seen.push(n);
            legal_steps += 1;
            prop_assert!(legal_steps < 50);
        }
        prop_assert!(task.state.is_terminal());
        prop_assert_eq!(seen.iter().filter(|s| s.is_terminal()).count(), 1);
        // states and timestamps both follow lifecycle order
        prop_assert!(seen.windows(2).all(|w| w[0] < w[1]));
        let mut stamps: Vec<_> = task.timestamps.iter().collect();
        stamps.sort_by_key(|(s, _)| **s);
        prop_assert!(stamps.windows(2).all(|w| w[0].1 <= w[1].1));
    }

    #[test]
    fn node_list_is_pure(nodes in 1u32..64, cpn in 1u32..64, gpn in 0u32..8) {
        let pd = PilotDescription::simulated("p", nodes, cpn, gpn);
        prop_assert_eq!(build_node_list(&pd), build_node_list(&pd));
    }

    #[test]
    fn dvm_partition_is_a_disjoint_cover(nodes in 1u32..600, max in 1u32..300) {
        let pd = PilotDescription::simulated("p", nodes, 1, 0);
        let dvms = partition_dvms(&build_node_list(&pd), max, LatencyModel::zero());
        let mut next = 0;
        for d in &dvms {
            prop_assert_eq!(d.node_indices.start, next);
            prop_assert!(!d.node_indices.is_empty() && d.node_indices.len() <= max as usize);
            next = d.node_indices.end;
        }
        prop_assert_eq!(next, nodes as usize);
    }

    #[test]
    fn round_robin_is_fair(d in 1usize..12, k in 1usize..20, failed in prop::collection::vec(any::<bool>(), 12)) {
        let pd = PilotDescription::simulated("p", 12, 1, 0);
        let mut dvms = partition_dvms(&build_node_list(&pd), 1, LatencyModel::zero());
        dvms.truncate(d);
        for (dv, f) in dvms.iter_mut().zip(&failed) {
            dv.state = if *f { DvmState::Failed } else { DvmState::Ready };
        }
        let ready = dvms.iter().filter(|x| x.state == DvmState::Ready).count();
        prop_assume!(ready > 0);
        let mut sel = DvmSelector::new();
        let mut counts: HashMap<u32, usize> = HashMap::new();
        for _ in 0..k * ready {
            *counts.entry(sel.select(None, &dvms, DvmPolicy::RoundRobin).unwrap()).or_default() += 1;
        }
        prop_assert_eq!(counts.len(), ready);
        prop_assert!(counts.values().all(|&c| c == k));
    }

    #[test]
    fn scheduler_conserves_slots(seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let pd = PilotDescription::simulated("p", rng.gen_range(1..6), rng.gen_range(1..9), rng.gen_range(0..3));
        let run_once = |rng: &mut rand_chacha::ChaCha8Rng| {
            let mut s: Scheduler<()> = Scheduler::single(SlotMap::new(&pd));
            let mut held: Vec<Placement> = Vec::new();
            let mut order = Vec::new();
            let mut mpi_of = HashMap::new();
            for i in 0..40 {
                if !held.is_empty() && rng.gen_bool(0.4) {
                    let p = held.remove(rng.gen_range(0..held.len()));
                    for (q, ()) in s.release(&p).unwrap() {
                        order.push(q.clone());
                        held.push(q);
                    }
                }
                let mpi = rng.gen_bool(0.3);
                let td = TaskDescription::executable(format!("t{i}"), "x")
                    .with_cores(rng.gen_range(1..=pd.cores_per_node * if mpi { 2 } else { 1 }))
                    .with_gpus(rng.gen_range(0..=pd.gpus_per_node))
                    .with_mpi(mpi);
                let Ok(v) = validate_task_description(&td, &pd) else { continue };
                mpi_of.insert(td.uid.clone(), mpi);
                if let Admission::Placed(p, ()) = s.submit(0, v, ()) {
                    order.push(p.clone());
                    held.push(p);
                }
                let busy: usize = s.slots().busy().values().map(|p| p.cores()).sum();
                let free = s.slots().free_total_cores() as usize;
                assert_eq!(busy + free, pd.total_cores() as usize);
                for p in s.slots().busy().values() {
                    assert!(mpi_of[&p.task_uid] || p.assignments.len() == 1);
                }
            }
            // liveness: releasing everything drains the waiting list
            while let Some(p) = held.pop() {
                for (q, ()) in s.release(&p).unwrap() {
                    order.push(q.clone());
                    held.push(q);
                }
            }
            assert_eq!(s.waiting_len(), 0);
            order
        };
        let mut r1 = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 1);
        let mut r2 = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 1);
        prop_assert_eq!(run_once(&mut r1), run_once(&mut r2));
    }

    #[test]
    fn queue_delivers_exactly_once_in_producer_order(consumers in 1usize..5, n in 1usize..400) {
        let bus = Bus::new(1 << 12);
        let ch = bus.open_channel("q", ChannelKind::Queue, Transport::InProcess).unwrap();
        let mut rxs: Vec<_> = (0..consumers).map(|_| ch.receiver().unwrap()).collect();
        for i in 0..n {
            ch.send_msg(&(i as u64)).unwrap();
        }
        let mut got = Vec::new();
        let mut idle = 0;
        while got.len() < n && idle < 50 {
            let before = got.len();
            for rx in &mut rxs {
                let batch: Vec<u64> = rx.recv_msgs(7, Duration::from_millis(1)).unwrap();
                // each consumer sees a subsequence of producer order
                prop_assert!(batch.windows(2).all(|w| w[0] < w[1]));
                got.extend(batch);
            }
            idle = if got.len() == before { idle + 1 } else { 0 };
        }
        got.sort();
        prop_assert_eq!(got, (0..n as u64).collect::<Vec<_>>());
    }

    #[test]
    fn buffering_is_transparent(buf in 1usize..64, n in 0usize..300) {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        for (dir, size) in [(a.path(), buf), (b.path(), 4096)] {
            let sink = pilotkit::tracer::TraceSink::new(dir, size);
            let mut t = sink.tracer("c");
            for i in 0..n {
                t.emit(Micros(i as i64), names::TASK_STATE, Some(&format!("t{i}")), Some("x,y"));
            }
        }
        let read = |d: &std::path::Path| std::fs::read_to_string(d.join("c.csv")).unwrap_or_default();
        prop_assert_eq!(read(a.path()), read(b.path()));
    }
}

fn mixed_tasks(seed: u64, n: usize, cpn: u32, gpn: u32) -> Vec<TaskDescription> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let mpi = rng.gen_bool(0.2);
            let cores = rng.gen_range(1..=if mpi { cpn * 2 } else { cpn });
            TaskDescription::executable(format!("t{i:04}"), "pilotkit-emulate")
                .with_args(["--duration".to_string(), format!("{:.3}", rng.gen_range(0.1..3.0))])
                .with_cores(cores)
                .with_gpus(rng.gen_range(0..=gpn))
                .with_mpi(mpi)
        })
        .collect()
}

proptest! {
    #![proptest_config(cfg(24))]

    #[test]
    fn simulated_runs_keep_every_invariant(seed in any::<u64>(), n in 1usize..80) {
        let mut pd = PilotDescription::simulated("p", 4, 6, 2);
        pd.dvm_max_nodes = 2;
        pd.launcher_latency_model = LatencyModel {
            prepare_mean_s: 0.05,
            prepare_std_s: 0.02,
            ack_mean_s: 0.1,
            ack_std_s: 0.05,
            bootstrap_s: 1.0,
            teardown_s: 0.5,
            ..LatencyModel::zero()
        };
        let tds = mixed_tasks(seed, n, 6, 2);
        let longest = tds.iter().map(|t| t.arguments[1].parse::<f64>().unwrap()).fold(0.0, f64::max);
        let r = run(pd, tds, SessionConfig::default().with_seed(seed));
        prop_assert!(r.infos.iter().all(|i| i.state == TaskState::Done));
        let t = r.trace();
        let rep = replay_placements(&t);
        prop_assert!(rep.is_clean(), "{:?}", rep);
        let u = compute_utilization(&t, "p").unwrap();
        prop_assert_eq!(u.residual_us(), 0);
        prop_assert!(compute_ttx(&t, None).unwrap() + 1e-6 >= longest);
        // exactly one completion per uid and the six events in order
        let tls = task_timelines(&t, "p");
        prop_assert_eq!(tls.len(), n);
        for tl in tls.values() {
            prop_assert_eq!(tl.attempts.len(), 1);
            let a = &tl.attempts[0];
            let seq = [Some(tl.pulled.unwrap()), Some(a.scheduled), a.prepare_start, a.exec_start, a.exec_stop, a.spawn_return];
            prop_assert!(seq.iter().all(Option::is_some));
            prop_assert!(seq.windows(2).all(|w| w[0] <= w[1]));
        }
        let spawn_returns = t.events.iter().filter(|e| e.event_name == names::SPAWN_RETURN).count();
        prop_assert_eq!(spawn_returns, n);
    }

    #[test]
    fn homogeneous_ttx_respects_generations(tasks in 1usize..60, cores in 1u32..4, dur in 1u32..5) {
        let pd = PilotDescription::simulated("p", 2, 4, 0);
        let mut tds = sleeps(tasks, f64::from(dur));
        for t in &mut tds {
            t.cores_per_task = cores;
        }
        let r = sim(pd, tds);
        let ttx = compute_ttx(&r.trace(), None).unwrap();
        let generations = (tasks as u64 * u64::from(cores)).div_ceil(8);
        prop_assert!(ttx + 1e-6 >= generations as f64 * f64::from(dur));
    }

    #[test]
    fn same_seed_same_metrics(seed in any::<u64>()) {
        let mut pd = PilotDescription::simulated("p", 3, 4, 1);
        pd.launcher_latency_model.prepare_mean_s = 0.2;
        pd.launcher_latency_model.prepare_std_s = 0.1;
        pd.launcher_latency_model.ack_mean_s = 0.1;
        pd.launcher_latency_model.ack_std_s = 0.1;
        let go = || {
            let r = run(pd.clone(), mixed_tasks(seed, 30, 4, 1), SessionConfig::default().with_seed(seed));
            let t = r.trace();
            (compute_utilization(&t, "p").unwrap(), latency_stats(&t, "p"))
        };
        prop_assert_eq!(go(), go());
    }
}

#[test]
fn prepare_mean_converges() {
    // sample means of growing runs stay within 3σ/√N of the configured mean
    for n in [100usize, 400, 1600] {
        let mut pd = PilotDescription::simulated("p", 8, 8, 0);
        pd.launcher_latency_model.prepare_mean_s = 0.037;
        pd.launcher_latency_model.prepare_std_s = 0.03;
        let r = run(pd, sleeps(n, 1.0), SessionConfig::default().with_seed(n as u64));
        let (prep, _) = latency_stats(&r.trace(), "p");
        assert_eq!(prep.n, n as u64);
        // normal clamped at zero shifts the mean a little; the bound uses
        // the configured σ
        let bound = 3.0 * 0.03 / (n as f64).sqrt() + 0.002;
        assert!((prep.mean_s - 0.037).abs() < bound, "n={n}: {}", prep.mean_s);
    }
}

#[test]
fn tasks_submitted_before_activation_run() {
    let root = tempfile::tempdir().unwrap();
    let s = Session::create(root.path(), SessionConfig::default()).unwrap();
    let mut pd = PilotDescription::simulated("p", 1, 4, 0);
    pd.launcher_latency_model.bootstrap_s = 30.0;
    let p = PilotManager::new(&s).submit_pilot(pd).unwrap();
    let tm = TaskManager::new(&s);
    tm.add_pilot(&p);
    let hs: Vec<_> = tm.submit_tasks(sleeps(8, 1.0)).into_iter().map(Result::unwrap).collect();
    let infos = tm.wait_tasks(&hs, Some(Duration::from_secs(30))).unwrap();
    assert!(infos.iter().all(|i| i.state == TaskState::Done));
    s.close();
}

#[test]
fn two_pilots_split_evenly() {
    let root = tempfile::tempdir().unwrap();
    let s = Session::create(root.path(), SessionConfig::default()).unwrap();
    let pm = PilotManager::new(&s);
    let ps = pm
        .submit_pilots(vec![
            PilotDescription::simulated("a", 1, 4, 0),
            PilotDescription::simulated("b", 2, 4, 0),
        ])
        .unwrap();
    let tm = TaskManager::new(&s);
    for p in &ps {
        p.wait_active(Duration::from_secs(10));
        tm.add_pilot(p);
    }
    let hs: Vec<_> = tm.submit_tasks(sleeps(101, 1.0)).into_iter().map(Result::unwrap).collect();
    let infos = tm.wait_tasks(&hs, Some(Duration::from_secs(30))).unwrap();
    let mut per: BTreeMap<String, usize> = BTreeMap::new();
    for i in &infos {
        *per.entry(i.pilot.clone().unwrap()).or_default() += 1;
    }
    let v: Vec<usize> = per.values().copied().collect();
    assert_eq!(v.len(), 2);
    assert!(v[0].abs_diff(v[1]) <= 1, "{per:?}");
    s.close();
}

#[test]
fn sandboxes_are_distinct() {
    let mut pd = PilotDescription::local("p", 2);
    pd.oversubscribe = true;
    let tds: Vec<_> = (0..10)
        .map(|i| TaskDescription::function(format!("f{i}"), "arith").with_args([format!("{i}")]))
        .collect();
    let r = run(pd, tds, SessionConfig::default());
    assert!(r.infos.iter().all(|i| i.state == TaskState::Done));
    let dirs: HashSet<_> = std::fs::read_dir(r.dir.join("p")).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(dirs.len(), 10);
}
