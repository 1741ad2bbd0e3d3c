use std::fs::File;
use std::path::Path;
use std::process::{Child, Command, ExitStatus, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use super::{CommandSpec, ExecError};
use crate::time::{Clock, Micros};

/// Time a child gets between SIGTERM and SIGKILL.
pub const TERM_GRACE: Duration = Duration::from_secs(5);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompletionRecord {
    pub exit_code: i32,
    pub start_ts: Micros,
    pub stop_ts: Micros,
}

/// Starts `cmd` in `sandbox` with stdout/stderr captured to `task.out` and
/// `task.err` there.
pub fn start_child(cmd: &CommandSpec, sandbox: &Path) -> Result<Child, ExecError> {
    let io = |e: std::io::Error| ExecError::SpawnFailure(format!("{}: {e}", sandbox.display()));
    std::fs::create_dir_all(sandbox).map_err(io)?;
    let out = File::create(sandbox.join("task.out")).map_err(io)?;
    let err = File::create(sandbox.join("task.err")).map_err(io)?;
    Command::new(&cmd.program)
        .args(&cmd.args)
        .envs(&cmd.env)
        .current_dir(sandbox)
        .stdin(Stdio::null())
        .stdout(out)
        .stderr(err)
        .spawn()
        .map_err(|e| ExecError::SpawnFailure(format!("{}: {e}", cmd.program.display())))
}

/// Exit code, or minus the signal number for signalled children.
pub fn exit_code_of(status: ExitStatus) -> i32 {
    use std::os::unix::process::ExitStatusExt;
    status
        .code()
        .or_else(|| status.signal().map(|s| -s))
        .unwrap_or(-1)
}

/// SIGTERM, wait up to `grace`, then SIGKILL.
pub fn terminate_child(child: &mut Child, grace: Duration) -> Option<ExitStatus> {
    if let Ok(Some(status)) = child.try_wait() {
        return Some(status);
    }
    // SAFETY: kill(2) on a pid we own and have not yet reaped.
    unsafe {
        libc::kill(child.id() as libc::pid_t, libc::SIGTERM);
    }
    let deadline = Instant::now() + grace;
    while Instant::now() < deadline {
        match child.try_wait() {
            Ok(Some(status)) => return Some(status),
            Ok(None) => thread::sleep(Duration::from_millis(5)),
            Err(_) => return None,
        }
    }
    let _ = child.kill();
    child.wait().ok()
}

/// Runs `cmd` to completion in `sandbox`.
pub fn spawn_local(cmd: &CommandSpec, sandbox: &Path, clock: &Clock) -> Result<CompletionRecord, ExecError> {
    let start_ts = clock.now();
    let mut child = start_child(cmd, sandbox)?;
    let status = child
        .wait()
        .map_err(|e| ExecError::SpawnFailure(e.to_string()))?;
    Ok(CompletionRecord {
        exit_code: exit_code_of(status),
        start_ts,
        stop_ts: clock.now(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;
    use std::path::PathBuf;

    fn sh(script: &str) -> CommandSpec {
        CommandSpec {
            program: PathBuf::from("/bin/sh"),
            args: vec!["-c".into(), script.into()],
            env: BTreeMap::from([("PILOTKIT_TASK_ID".to_string(), "t".to_string())]),
            slots: String::new(),
        }
    }

    #[test]
    fn captures_exit_code_and_output() {
        let dir = tempfile::tempdir().unwrap();
        let clock = Clock::wall();
        let rec = spawn_local(&sh("echo $PILOTKIT_TASK_ID; exit 7"), dir.path(), &clock).unwrap();
        assert_eq!(rec.exit_code, 7);
        assert!(rec.stop_ts >= rec.start_ts);
        assert_eq!(std::fs::read_to_string(dir.path().join("task.out")).unwrap(), "t\n");
    }

    #[test]
    fn missing_program_is_spawn_failure() {
        let dir = tempfile::tempdir().unwrap();
        let mut cmd = sh("");
        cmd.program = PathBuf::from("/definitely/not/here");
        let err = spawn_local(&cmd, dir.path(), &Clock::wall()).unwrap_err();
        assert!(matches!(err, ExecError::SpawnFailure(_)));
    }

    #[test]
    fn terminate_stops_sleeper() {
        let dir = tempfile::tempdir().unwrap();
        let mut child = start_child(&sh("sleep 30"), dir.path()).unwrap();
        let t0 = Instant::now();
        let status = terminate_child(&mut child, TERM_GRACE).unwrap();
        assert!(t0.elapsed() < Duration::from_secs(4));
        assert_eq!(exit_code_of(status), -libc::SIGTERM);
    }
}
