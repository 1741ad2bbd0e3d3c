//! Pilot descriptions, launcher latency models and node lists.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fabric {
    /// Real child processes on this machine, wall clock.
    Local,
    /// Discrete-event launchers on a virtual clock.
    Simulated,
}

/// How tasks are spread over DVMs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DvmPolicy {
    #[default]
    RoundRobin,
    Tagged,
}

/// Launcher latency knobs, in seconds. Only the simulated fabric samples
/// them.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct LatencyModel {
    pub prepare_mean_s: f64,
    pub prepare_std_s: f64,
    pub ack_mean_s: f64,
    pub ack_std_s: f64,
    /// ack mean is scaled by `(1 + inflight)^ack_scale_exponent`.
    pub ack_scale_exponent: f64,
    /// pilot_start to agent_ready.
    pub bootstrap_s: f64,
    /// last spawn_return to agent_stop.
    pub teardown_s: f64,
}

impl LatencyModel {
    pub fn zero() -> Self {
        LatencyModel::default()
    }

    /// Mean ack latency with `inflight` tasks already running on the DVM.
    pub fn ack_mean_at(&self, inflight: u64) -> f64 {
        if self.ack_scale_exponent == 0.0 {
            self.ack_mean_s
        } else {
            self.ack_mean_s * ((1 + inflight) as f64).powf(self.ack_scale_exponent)
        }
    }

    fn check(&self) -> Result<(), PilotError> {
        let fields = [
            ("prepare_mean_s", self.prepare_mean_s),
            ("prepare_std_s", self.prepare_std_s),
            ("ack_mean_s", self.ack_mean_s),
            ("ack_std_s", self.ack_std_s),
            ("bootstrap_s", self.bootstrap_s),
            ("teardown_s", self.teardown_s),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v >= 0.0) {
                return Err(PilotError::Invalid(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        if !self.ack_scale_exponent.is_finite() {
            return Err(PilotError::Invalid("ack_scale_exponent must be finite".into()));
        }
        Ok(())
    }
}

/// Forces a DVM into the failed state at a virtual time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DvmFailure {
    pub dvm: u32,
    pub at_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotDescription {
    pub uid: String,
    pub fabric: Fabric,
    pub nodes: u32,
    pub cores_per_node: u32,
    #[serde(default)]
    pub gpus_per_node: u32,
    #[serde(default = "default_walltime")]
    pub walltime_s: f64,
    #[serde(default = "default_dvm_max")]
    pub dvm_max_nodes: u32,
    #[serde(default)]
    pub dvm_policy: DvmPolicy,
    #[serde(default)]
    pub launcher_latency_model: LatencyModel,
    #[serde(default)]
    pub dvm_failures: Vec<DvmFailure>,
    /// Tasks taken from the queue per pull.
    #[serde(default = "default_bulk")]
    pub bulk_size: u32,
    /// Lifts the local `cores_per_node <= physical cores` check.
    #[serde(default)]
    pub oversubscribe: bool,
}

fn default_walltime() -> f64 {
    86_400.0
}

fn default_dvm_max() -> u32 {
    256
}

fn default_bulk() -> u32 {
    1024
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PilotError {
    #[error("invalid pilot description: {0}")]
    Invalid(String),
    #[error("cannot read resource profile {path}: {reason}")]
    Profile { path: String, reason: String },
}

impl PilotDescription {
    pub fn new(uid: impl Into<String>, fabric: Fabric) -> Self {
        PilotDescription {
            uid: uid.into(),
            fabric,
            nodes: 1,
            cores_per_node: 1,
            gpus_per_node: 0,
            walltime_s: default_walltime(),
            dvm_max_nodes: default_dvm_max(),
            dvm_policy: DvmPolicy::RoundRobin,
            launcher_latency_model: LatencyModel::zero(),
            dvm_failures: Vec::new(),
            bulk_size: default_bulk(),
            oversubscribe: false,
        }
    }

    /// Simulated pilot of identical nodes with a zero latency model.
    pub fn simulated(uid: impl Into<String>, nodes: u32, cores_per_node: u32, gpus_per_node: u32) -> Self {
        PilotDescription {
            nodes,
            cores_per_node,
            gpus_per_node,
            ..PilotDescription::new(uid, Fabric::Simulated)
        }
    }

    /// Single-node local pilot.
    pub fn local(uid: impl Into<String>, cores: u32) -> Self {
        PilotDescription {
            cores_per_node: cores,
            ..PilotDescription::new(uid, Fabric::Local)
        }
    }

    pub fn total_cores(&self) -> u64 {
        u64::from(self.nodes) * u64::from(self.cores_per_node)
    }

    pub fn total_gpus(&self) -> u64 {
        u64::from(self.nodes) * u64::from(self.gpus_per_node)
    }

    pub fn validate(&self) -> Result<(), PilotError> {
        let bad = |m: String| Err(PilotError::Invalid(m));
        if self.uid.trim().is_empty() {
            return bad("uid is empty".into());
        }
        if self.uid.contains(['/', '\\']) || self.uid == "." || self.uid == ".." {
            return bad(format!("uid {:?} is not a valid directory name", self.uid));
        }
        if self.nodes == 0 {
            return bad("nodes must be at least 1".into());
        }
        if self.cores_per_node == 0 {
            return bad("cores_per_node must be at least 1".into());
        }
        if !(self.walltime_s.is_finite() && self.walltime_s > 0.0) {
            return bad(format!("walltime_s must be positive, got {}", self.walltime_s));
        }
        if self.dvm_max_nodes == 0 {
            return bad("dvm_max_nodes must be at least 1".into());
        }
        if self.bulk_size == 0 {
            return bad("bulk_size must be at least 1".into());
        }
        self.launcher_latency_model.check()?;
        for f in &self.dvm_failures {
            if !(f.at_s.is_finite() && f.at_s >= 0.0) {
                return bad(format!("dvm failure time must be non-negative, got {}", f.at_s));
            }
        }
        if self.fabric == Fabric::Local {
            if self.nodes != 1 {
                return bad(format!("local fabric has exactly 1 node, got {}", self.nodes));
            }
            let physical = physical_cores();
            if !self.oversubscribe && self.cores_per_node > physical {
                return bad(format!(
                    "local pilot asks for {} cores but the machine has {physical}; set oversubscribe to allow it",
                    self.cores_per_node
                ));
            }
            if self.gpus_per_node > 0 {
                return bad("local fabric does not expose gpus".into());
            }
        }
        Ok(())
    }

    /// Reads a JSON resource profile.
    pub fn from_profile(path: &Path) -> Result<Self, PilotError> {
        let err = |reason: String| PilotError::Profile {
            path: path.display().to_string(),
            reason,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let pd: PilotDescription = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        pd.validate()?;
        Ok(pd)
    }
}

pub fn physical_cores() -> u32 {
    std::thread::available_parallelism()
        .map(|n| n.get() as u32)
        .unwrap_or(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SlotState {
    Free,
    Busy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub name: String,
    pub core_states: Vec<SlotState>,
    pub gpu_states: Vec<SlotState>,
}

impl Node {
    pub fn free_cores(&self) -> usize {
        self.core_states.iter().filter(|s| **s == SlotState::Free).count()
    }

    pub fn free_gpus(&self) -> usize {
        self.gpu_states.iter().filter(|s| **s == SlotState::Free).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeList {
    pub nodes: Vec<Node>,
}

impl NodeList {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        node_index_from_name(name).filter(|i| *i < self.nodes.len())
    }
}

pub fn node_name(index: usize) -> String {
    format!("node{index:05}")
}

fn node_index_from_name(name: &str) -> Option<usize> {
    let digits = name.strip_prefix("node")?;
    if digits.len() < 5 || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let idx: usize = digits.parse().ok()?;
    (node_name(idx) == name).then_some(idx)
}

/// All-free node list for `pd`.
pub fn build_node_list(pd: &PilotDescription) -> NodeList {
    let nodes = (0..pd.nodes as usize)
        .map(|i| Node {
            name: node_name(i),
            core_states: vec![SlotState::Free; pd.cores_per_node as usize],
            gpu_states: vec![SlotState::Free; pd.gpus_per_node as usize],
        })
        .collect();
    NodeList { nodes }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn node_list_shape() {
        let nl = build_node_list(&PilotDescription::simulated("p", 2, 4, 1));
        assert_eq!(nl.len(), 2);
        assert_eq!(nl.nodes.iter().map(Node::free_cores).sum::<usize>(), 8);
        assert_eq!(nl.nodes.iter().map(Node::free_gpus).sum::<usize>(), 2);
        assert_eq!(nl.nodes[1].name, "node00001");
    }

    #[test]
    fn summit_node_shape() {
        let nl = build_node_list(&PilotDescription::simulated("p", 1, 42, 6));
        assert_eq!(nl.nodes[0].core_states.len(), 42);
        assert_eq!(nl.nodes[0].gpu_states.len(), 6);
    }

    #[test]
    fn build_is_pure() {
        let pd = PilotDescription::simulated("p", 7, 3, 2);
        assert_eq!(build_node_list(&pd), build_node_list(&pd));
    }

    #[test]
    fn zero_nodes_rejected() {
        let pd = PilotDescription::simulated("p", 0, 4, 0);
        assert!(pd.validate().is_err());
    }

    #[test]
    fn local_rules() {
        let mut pd = PilotDescription::local("p", physical_cores() + 1);
        assert!(pd.validate().is_err());
        pd.oversubscribe = true;
        assert!(pd.validate().is_ok());
        pd.nodes = 2;
        assert!(pd.validate().is_err());
    }

    #[test]
    fn node_names_parse_back() {
        let nl = build_node_list(&PilotDescription::simulated("p", 3, 1, 0));
        assert_eq!(nl.index_of("node00002"), Some(2));
        assert_eq!(nl.index_of("node00003"), None);
        assert_eq!(nl.index_of("node2"), None);
        assert_eq!(nl.index_of("A"), None);
    }

    #[test]
    fn ack_mean_scaling() {
        let m = LatencyModel {
            ack_mean_s: 0.1,
            ack_scale_exponent: 0.5,
            ..LatencyModel::zero()
        };
        assert!((m.ack_mean_at(3) - 0.2).abs() < 1e-12);
        assert_eq!(LatencyModel { ack_mean_s: 0.1, ..LatencyModel::zero() }.ack_mean_at(99), 0.1);
    }

    #[test]
    fn profile_parses_with_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        std::fs::write(
            &path,
            r#"{"uid":"sim","fabric":"simulated","nodes":4,"cores_per_node":8}"#,
        )
        .unwrap();
        let pd = PilotDescription::from_profile(&path).unwrap();
        assert_eq!(pd.bulk_size, 1024);
        assert_eq!(pd.dvm_max_nodes, 256);
        assert_eq!(pd.gpus_per_node, 0);
    }
}
