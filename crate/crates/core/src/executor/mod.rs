//! Launchers: DVM partitioning and selection, launch commands, local
//! process spawning, simulated completion latencies and the built-in
//! function registry.

pub mod functions;
mod latency;
mod local;

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use latency::{derive_seed, normal_clamped, LatencySampler};
pub use local::{exit_code_of, spawn_local, start_child, terminate_child, CompletionRecord, TERM_GRACE};

use crate::pilot::{DvmPolicy, LatencyModel, NodeList};
use crate::scheduler::Placement;
use crate::task::{Task, TaskKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DvmState {
    Booting,
    Ready,
    Failed,
    Down,
}

/// One launcher instance over a consecutive node range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dvm {
    pub id: u32,
    pub node_indices: Range<usize>,
    pub state: DvmState,
    pub latency_model: LatencyModel,
    pub inflight: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaunchMethod {
    LocalSpawn,
    Simulated,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExecError {
    #[error("no ready DVM")]
    NoReadyDvm,
    #[error("task {0} is a function task and has no launch command")]
    UnsupportedKind(String),
    #[error("spawn failed: {0}")]
    SpawnFailure(String),
    #[error("DVM {0} failed")]
    DvmFailed(u32),
}

/// `ceil(nodes / max_nodes)` DVMs over consecutive node ranges; the last
/// one takes the remainder.
pub fn partition_dvms(node_list: &NodeList, max_nodes_per_dvm: u32, model: LatencyModel) -> Vec<Dvm> {
    let n = node_list.len();
    let max = max_nodes_per_dvm.max(1) as usize;
    (0..n.div_ceil(max))
        .map(|i| Dvm {
            id: i as u32,
            node_indices: i * max..((i + 1) * max).min(n),
            state: DvmState::Booting,
            latency_model: model,
            inflight: 0,
        })
        .collect()
}

/// 64-bit FNV-1a, stable across runs and platforms.
pub fn stable_hash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Picks DVMs for tasks. Keeps the round-robin cursor.
#[derive(Debug, Clone, Default)]
pub struct DvmSelector {
    last: Option<u32>,
}

impl DvmSelector {
    pub fn new() -> Self {
        DvmSelector::default()
    }

    /// Round robin cycles over ready DVMs in id order; the tagged policy
    /// hashes the tag onto the ready set. Untagged tasks fall back to round
    /// robin under the tagged policy.
    pub fn select(&mut self, tag: Option<&str>, dvms: &[Dvm], policy: DvmPolicy) -> Result<u32, ExecError> {
        let mut ready: Vec<u32> = dvms.iter().filter(|d| d.state == DvmState::Ready).map(|d| d.id).collect();
        if ready.is_empty() {
            return Err(ExecError::NoReadyDvm);
        }
        ready.sort_unstable();
        if let (DvmPolicy::Tagged, Some(tag)) = (policy, tag) {
            return Ok(ready[(stable_hash(tag) % ready.len() as u64) as usize]);
        }
        let next = match self.last {
            Some(last) => ready.iter().copied().find(|&id| id > last).unwrap_or(ready[0]),
            None => ready[0],
        };
        self.last = Some(next);
        Ok(next)
    }
}

pub fn select_dvm(
    selector: &mut DvmSelector,
    task: &Task,
    dvms: &[Dvm],
    policy: DvmPolicy,
) -> Result<u32, ExecError> {
    selector.select(task.description.tag.as_deref(), dvms, policy)
}

/// Everything needed to start a local child process.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommandSpec {
    pub program: PathBuf,
    pub args: Vec<String>,
    pub env: BTreeMap<String, String>,
    /// Human-readable slot description, e.g. `node00000:0,1`.
    pub slots: String,
}

/// Names that resolve to the bundled task emulator.
pub const EMULATOR_ALIASES: &[&str] = &["pilotkit-emulate", "emulate"];

/// Launch command for an executable task. `emulator` replaces the program
/// when the task names the bundled emulator.
pub fn build_launch_command(
    task: &Task,
    placement: &Placement,
    emulator: Option<&std::path::Path>,
) -> Result<CommandSpec, ExecError> {
    let td = &task.description;
    if td.kind != TaskKind::Executable {
        return Err(ExecError::UnsupportedKind(td.uid.clone()));
    }
    let program = match emulator {
        Some(path) if EMULATOR_ALIASES.contains(&td.name.as_str()) => path.to_path_buf(),
        _ => PathBuf::from(&td.name),
    };
    let join = |v: &mut dyn Iterator<Item = u32>| v.map(|i| i.to_string()).collect::<Vec<_>>().join(",");
    let cores = join(&mut placement.assignments.iter().flat_map(|a| a.core_indices.iter().copied()));
    let gpus = join(&mut placement.assignments.iter().flat_map(|a| a.gpu_indices.iter().copied()));
    let mut env = td.environment.clone();
    env.insert("PILOTKIT_TASK_ID".into(), td.uid.clone());
    env.insert("PILOTKIT_CORES".into(), cores);
    env.insert("PILOTKIT_GPUS".into(), gpus);
    let slots = placement
        .assignments
        .iter()
        .map(|a| {
            let c: Vec<String> = a.core_indices.iter().map(|i| i.to_string()).collect();
            format!("{}:{}", crate::pilot::node_name(a.node_index), c.join(","))
        })
        .collect::<Vec<_>>()
        .join(";");
    Ok(CommandSpec {
        program,
        args: td.arguments.clone(),
        env,
        slots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pilot::{build_node_list, PilotDescription};
    use crate::scheduler::NodeAssignment;
    use crate::task::TaskDescription;

    fn dvms(nodes: u32, max: u32) -> Vec<Dvm> {
        let nl = build_node_list(&PilotDescription::simulated("p", nodes, 1, 0));
        partition_dvms(&nl, max, LatencyModel::zero())
    }

    #[test]
    fn partition_examples() {
        let d = dvms(1024, 256);
        assert_eq!(d.len(), 4);
        assert!(d.iter().all(|x| x.node_indices.len() == 256));
        let d = dvms(4097, 256);
        assert_eq!(d.len(), 17);
        assert_eq!(d[16].node_indices, 4096..4097);
        assert_eq!(dvms(1, 256).len(), 1);
    }

    fn ready(mut d: Vec<Dvm>) -> Vec<Dvm> {
        for x in &mut d {
            x.state = DvmState::Ready;
        }
        d
    }

    #[test]
    fn round_robin_and_failure_skip() {
        let mut d = ready(dvms(4, 1));
        let mut s = DvmSelector::new();
        let ids: Vec<u32> = (0..8).map(|_| s.select(None, &d, DvmPolicy::RoundRobin).unwrap()).collect();
        assert_eq!(ids, vec![0, 1, 2, 3, 0, 1, 2, 3]);
        d[2].state = DvmState::Failed;
        let mut s = DvmSelector::new();
        let ids: Vec<u32> = (0..6).map(|_| s.select(None, &d, DvmPolicy::RoundRobin).unwrap()).collect();
        assert_eq!(ids, vec![0, 1, 3, 0, 1, 3]);
    }

    #[test]
    fn tagged_is_stable_and_no_ready_errors() {
        let d = ready(dvms(8, 1));
        let mut s = DvmSelector::new();
        let a = s.select(Some("grp"), &d, DvmPolicy::Tagged).unwrap();
        let b = s.select(Some("grp"), &d, DvmPolicy::Tagged).unwrap();
        assert_eq!(a, b);
        let none = dvms(2, 1);
        assert_eq!(s.select(None, &none, DvmPolicy::RoundRobin), Err(ExecError::NoReadyDvm));
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(stable_hash(""), 0xcbf29ce484222325);
        assert_eq!(stable_hash("a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn launch_command_env_and_args() {
        let td = TaskDescription::executable("t1", "pilotkit-emulate").with_args(["--duration", "2"]);
        let task = Task::new(td);
        let p = Placement {
            task_uid: "t1".into(),
            assignments: vec![NodeAssignment {
                node_index: 0,
                core_indices: vec![0, 1],
                gpu_indices: vec![],
            }],
            dvm_id: None,
        };
        let emu = PathBuf::from("/opt/emu");
        let cmd = build_launch_command(&task, &p, Some(&emu)).unwrap();
        assert_eq!(cmd.program, emu);
        assert_eq!(cmd.args, vec!["--duration", "2"]);
        assert_eq!(cmd.env["PILOTKIT_CORES"], "0,1");
        assert_eq!(cmd.env["PILOTKIT_TASK_ID"], "t1");
        assert_eq!(cmd.env["PILOTKIT_GPUS"], "");
        assert_eq!(cmd.slots, "node00000:0,1");
        let f = Task::new(TaskDescription::function("f", "noop"));
        assert!(matches!(build_launch_command(&f, &p, None), Err(ExecError::UnsupportedKind(_))));
    }
}
