//! Slot scheduling: Continuous and Tagged placement over a node list.

mod queue;
mod service;
mod slotmap;

pub use queue::{Admission, Scheduler, Scope};
pub use service::{schedule_loop, ScheduleIo, ScheduleStats};
pub use slotmap::{allocate_continuous, allocate_tagged, release_slots, AllocError, SlotMap};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NodeAssignment {
    pub node_index: usize,
    pub core_indices: Vec<u32>,
    pub gpu_indices: Vec<u32>,
}

/// Slots held by one task.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Placement {
    pub task_uid: String,
    pub assignments: Vec<NodeAssignment>,
    pub dvm_id: Option<u32>,
}

impl Placement {
    pub fn cores(&self) -> usize {
        self.assignments.iter().map(|a| a.core_indices.len()).sum()
    }

    pub fn gpus(&self) -> usize {
        self.assignments.iter().map(|a| a.gpu_indices.len()).sum()
    }

    /// Compact form used in `schedule_ok` trace details, free of commas:
    /// `[d<dvm>|]<node>:<cores>/<gpus>;...` with index lists like `0-3.5`.
    pub fn encode(&self) -> String {
        let mut out = String::new();
        if let Some(d) = self.dvm_id {
            out.push_str(&format!("d{d}|"));
        }
        for (i, a) in self.assignments.iter().enumerate() {
            if i > 0 {
                out.push(';');
            }
            out.push_str(&a.node_index.to_string());
            out.push(':');
            out.push_str(&encode_indices(&a.core_indices));
            out.push('/');
            out.push_str(&encode_indices(&a.gpu_indices));
        }
        out
    }

    pub fn decode(task_uid: &str, text: &str) -> Option<Placement> {
        let (dvm_id, body) = match text.split_once('|') {
            Some((d, rest)) => (Some(d.strip_prefix('d')?.parse().ok()?), rest),
            None => (None, text),
        };
        let mut assignments = Vec::new();
        for part in body.split(';') {
            let (node, slots) = part.split_once(':')?;
            let (cores, gpus) = slots.split_once('/')?;
            assignments.push(NodeAssignment {
                node_index: node.parse().ok()?,
                core_indices: decode_indices(cores)?,
                gpu_indices: decode_indices(gpus)?,
            });
        }
        Some(Placement {
            task_uid: task_uid.to_string(),
            assignments,
            dvm_id,
        })
    }
}

fn encode_indices(ix: &[u32]) -> String {
    let mut out = String::new();
    let mut i = 0;
    while i < ix.len() {
        let start = ix[i];
        let mut end = start;
        while i + 1 < ix.len() && ix[i + 1] == end + 1 {
            i += 1;
            end = ix[i];
        }
        if !out.is_empty() {
            out.push('.');
        }
        if end == start {
            out.push_str(&start.to_string());
        } else {
            out.push_str(&format!("{start}-{end}"));
        }
        i += 1;
    }
    out
}

fn decode_indices(text: &str) -> Option<Vec<u32>> {
    let mut out = Vec::new();
    if text.is_empty() {
        return Some(out);
    }
    for run in text.split('.') {
        match run.split_once('-') {
            Some((a, b)) => {
                let (a, b): (u32, u32) = (a.parse().ok()?, b.parse().ok()?);
                if b < a {
                    return None;
                }
                out.extend(a..=b);
            }
            None => out.push(run.parse().ok()?),
        }
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn placement_detail_round_trip() {
        let p = Placement {
            task_uid: "t".into(),
            assignments: vec![
                NodeAssignment {
                    node_index: 0,
                    core_indices: vec![0, 1, 2, 3, 5],
                    gpu_indices: vec![],
                },
                NodeAssignment {
                    node_index: 12,
                    core_indices: vec![7],
                    gpu_indices: vec![0, 1],
                },
            ],
            dvm_id: Some(3),
        };
        let text = p.encode();
        assert_eq!(text, "d3|0:0-3.5/;12:7/0-1");
        assert!(!text.contains(','));
        assert_eq!(Placement::decode("t", &text), Some(p));
        assert_eq!(Placement::decode("t", "0:3-1/"), None);
    }
}
