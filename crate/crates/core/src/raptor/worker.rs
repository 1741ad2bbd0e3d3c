use std::sync::atomic::{AtomicBool, Ordering};
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, Sender};

use super::{ctl_channel, work_channel, CallResult, CallState, FromWorker, FunctionCall, FunctionEnv, ToWorker};
use crate::bus::ChannelKind;
use crate::executor::functions;
use crate::tracer::names;

fn call_loop(worker: &str, jobs: Receiver<FunctionCall>, done: Sender<CallResult>, env: &FunctionEnv, i: u32, cancel: &AtomicBool) {
    let mut tracer = env.sink.tracer(format!("{}.raptor.{worker}.{i}", env.pilot));
    for call in jobs {
        if cancel.load(Ordering::Relaxed) {
            break;
        }
        tracer.emit(env.clock.now(), names::CALL_START, Some(&call.call_uid), Some(worker));
        let arg = String::from_utf8_lossy(&call.payload);
        let (state, output) = match functions::call(&call.function_name, &arg, cancel) {
            Ok(out) => (CallState::Done, out),
            Err(e) => (CallState::Failed, e.into_bytes()),
        };
        tracer.emit(env.clock.now(), names::CALL_STOP, Some(&call.call_uid), Some(worker));
        let _ = done.send(CallResult {
            call_uid: call.call_uid,
            state,
            output,
            worker: worker.to_string(),
        });
    }
    tracer.close();
}

/// Serves calls from the master until told to stop. A canceled worker
/// returns at once and reports nothing for calls it was holding.
pub(super) fn run(
    uid: &str,
    master: &str,
    capacity: u32,
    heartbeat_s: f64,
    env: &FunctionEnv,
    cancel: &AtomicBool,
) -> Result<Vec<u8>, String> {
    let open = |name: String| {
        env.bus
            .open_channel(&name, ChannelKind::Queue, env.transport.clone())
            .map_err(|e| e.to_string())
    };
    let mut work = open(work_channel(uid))?.receiver().map_err(|e| e.to_string())?;
    let ctl = open(ctl_channel(master))?;
    ctl.send_msg(&FromWorker::Register {
        worker: uid.to_string(),
        capacity,
    })
    .map_err(|e| e.to_string())?;

    let hb = Duration::from_secs_f64(heartbeat_s.max(0.001));
    let (job_tx, job_rx) = unbounded::<FunctionCall>();
    let (res_tx, res_rx) = unbounded::<CallResult>();
    let mut served = 0u64;
    thread::scope(|s| -> Result<(), String> {
        for i in 0..capacity {
            let (jobs, done) = (job_rx.clone(), res_tx.clone());
            s.spawn(move || call_loop(uid, jobs, done, env, i, cancel));
        }
        drop(res_tx);
        let mut job_tx = Some(job_tx);
        let mut outstanding = 0usize;
        let mut last_beat = Instant::now();
        loop {
            if cancel.load(Ordering::Relaxed) {
                return Ok(());
            }
            if job_tx.is_some() {
                let wait = if outstanding > 0 { Duration::ZERO } else { hb.min(Duration::from_millis(5)) };
                for msg in work.recv_msgs::<ToWorker>(64, wait).map_err(|e| e.to_string())? {
                    match msg {
                        ToWorker::Calls(calls) => {
                            outstanding += calls.len();
                            for c in calls {
                                let _ = job_tx.as_ref().expect("open").send(c);
                            }
                        }
                        ToWorker::Stop => {
                            job_tx = None;
                            break;
                        }
                    }
                }
            }
            let mut batch: Vec<CallResult> = Vec::new();
            match res_rx.recv_timeout(if outstanding > 0 { Duration::from_millis(1) } else { Duration::ZERO }) {
                Ok(r) => batch.push(r),
                Err(_) if job_tx.is_none() && outstanding == 0 => break,
                Err(_) => {}
            }
            batch.extend(res_rx.try_iter());
            if !batch.is_empty() {
                outstanding -= batch.len();
                served += batch.len() as u64;
                if cancel.load(Ordering::Relaxed) {
                    return Ok(());
                }
                ctl.send_msg(&FromWorker::Results {
                    worker: uid.to_string(),
                    results: batch,
                })
                .map_err(|e| e.to_string())?;
                last_beat = Instant::now();
            }
            if last_beat.elapsed() >= hb {
                ctl.send_msg(&FromWorker::Heartbeat { worker: uid.to_string() })
                    .map_err(|e| e.to_string())?;
                last_beat = Instant::now();
            }
            if job_tx.is_none() && outstanding == 0 {
                break;
            }
        }
        Ok(())
    })?;
    if cancel.load(Ordering::Relaxed) {
        return Err("canceled".into());
    }
    Ok(format!("{served} calls").into_bytes())
}
