//! Named built-in functions for function tasks and RAPTOR calls.
//!
//! Arguments arrive as UTF-8 text: `sleep` and `spin` take a duration in
//! seconds, `arith` takes an expression. Results are UTF-8 bytes; `noop`,
//! `sleep` and `spin` return nothing.

use std::sync::atomic::{AtomicBool, Ordering};
use std::thread;
use std::time::{Duration, Instant};

pub const BUILTINS: &[&str] = &["noop", "sleep", "spin", "arith"];

pub fn is_builtin(name: &str) -> bool {
    BUILTINS.contains(&name)
}

fn seconds(arg: &str) -> Result<Duration, String> {
    let s: f64 = arg
        .trim()
        .parse()
        .map_err(|_| format!("expected a duration in seconds, got {arg:?}"))?;
    if !(s.is_finite() && s >= 0.0) {
        return Err(format!("duration must be non-negative, got {s}"));
    }
    Ok(Duration::from_secs_f64(s))
}

/// Runs built-in `name` on `arg`. A set `cancel` flag cuts sleeps and spins
/// short with an error.
pub fn call(name: &str, arg: &str, cancel: &AtomicBool) -> Result<Vec<u8>, String> {
    match name {
        "noop" => Ok(Vec::new()),
        "sleep" => {
            let deadline = Instant::now() + seconds(arg)?;
            loop {
                let now = Instant::now();
                if now >= deadline {
                    return Ok(Vec::new());
                }
                if cancel.load(Ordering::Relaxed) {
                    return Err("canceled".into());
                }
                thread::sleep((deadline - now).min(Duration::from_millis(20)));
            }
        }
        "spin" => {
            let deadline = Instant::now() + seconds(arg)?;
            let mut x: u64 = 1;
            while Instant::now() < deadline {
                for _ in 0..1000 {
                    x = x.wrapping_mul(6364136223846793005).wrapping_add(1);
                }
                if cancel.load(Ordering::Relaxed) {
                    return Err("canceled".into());
                }
            }
            std::hint::black_box(x);
            Ok(Vec::new())
        }
        "arith" => evalexpr::eval(arg)
            .map(|v| v.to_string().into_bytes())
            .map_err(|e| e.to_string()),
        other => Err(format!("unknown function {other:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(name: &str, arg: &str) -> Result<Vec<u8>, String> {
        call(name, arg, &AtomicBool::new(false))
    }

    #[test]
    fn builtins() {
        assert_eq!(run("noop", ""), Ok(vec![]));
        assert_eq!(run("arith", "2+2"), Ok(b"4".to_vec()));
        assert!(run("arith", "2+").is_err());
        assert!(run("nope", "").unwrap_err().contains("unknown function"));
        let t = Instant::now();
        assert_eq!(run("sleep", "0.02"), Ok(vec![]));
        assert!(t.elapsed() >= Duration::from_millis(20));
        assert!(run("sleep", "-1").is_err());
    }

    #[test]
    fn cancel_interrupts_sleep() {
        let flag = AtomicBool::new(true);
        assert_eq!(call("sleep", "10", &flag), Err("canceled".into()));
    }
}
