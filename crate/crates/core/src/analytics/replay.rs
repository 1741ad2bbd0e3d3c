use std::collections::HashMap;

use super::timeline::task_timelines;
use super::Trace;
use crate::time::Micros;

/// Result of replaying every placement in a trace.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReplayReport {
    pub placements: u64,
    /// `pilot/node/slot: uid_a overlaps uid_b`
    pub overlaps: Vec<String>,
    /// Non-MPI tasks placed on more than one node.
    pub spanning: Vec<String>,
}

impl ReplayReport {
    pub fn is_clean(&self) -> bool {
        self.overlaps.is_empty() && self.spanning.is_empty()
    }
}

/// Checks that no core or GPU was ever held by two placements at once and
/// that only MPI tasks crossed node boundaries.
pub fn replay_placements(trace: &Trace) -> ReplayReport {
    let mut rep = ReplayReport::default();
    for pd in &trace.manifest.pilots {
        let mut slots: HashMap<(usize, bool, u32), Vec<(Micros, Micros, &str)>> = HashMap::new();
        let tls = task_timelines(trace, &pd.uid);
        for tl in tls.values() {
            for a in &tl.attempts {
                let Some(p) = &a.placement else { continue };
                rep.placements += 1;
                if p.assignments.len() > 1 && !tl.mpi {
                    rep.spanning.push(tl.uid.clone());
                }
                let end = a.end().unwrap_or(Micros(i64::MAX));
                for na in &p.assignments {
                    let cores = na.core_indices.iter().map(|&c| (na.node_index, false, c));
                    let gpus = na.gpu_indices.iter().map(|&g| (na.node_index, true, g));
                    for key in cores.chain(gpus) {
                        slots.entry(key).or_default().push((a.scheduled, end, tl.uid.as_str()));
                    }
                }
            }
        }
        let mut keys: Vec<_> = slots.keys().copied().collect();
        keys.sort();
        for key in keys {
            let occ = slots.get_mut(&key).expect("listed");
            occ.sort();
            let mut held = occ[0];
            for &next in &occ[1..] {
                if next.0 < held.1 {
                    let kind = if key.1 { "gpu" } else { "core" };
                    rep.overlaps.push(format!(
                        "{}/{}/{kind}{}: {} overlaps {}",
                        pd.uid, key.0, key.2, held.2, next.2
                    ));
                }
                if next.1 > held.1 {
                    held = next;
                }
            }
        }
    }
    rep
}
