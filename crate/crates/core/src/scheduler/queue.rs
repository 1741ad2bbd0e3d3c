use std::collections::VecDeque;
use std::ops::Range;

use super::{AllocError, Placement, SlotMap};
use crate::task::{validate_against_shape, ValidatedDescription};

/// A contiguous node range served by one launcher.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scope {
    pub nodes: Range<usize>,
    pub active: bool,
}

/// Outcome of handing a request to the scheduler.
#[derive(Debug)]
pub enum Admission<T> {
    Placed(Placement, T),
    Waiting,
    Rejected(String, T),
}

struct Entry<T> {
    td: ValidatedDescription,
    payload: T,
}

struct ScopeState<T> {
    scope: Scope,
    waiting: VecDeque<Entry<T>>,
    free_cores: u64,
    free_gpus: u64,
}

/// Slot map plus one FIFO waiting list per scope. Arrivals are placed
/// first-fit right away; waiting requests are rescanned in order whenever
/// slots in their scope are released.
pub struct Scheduler<T> {
    slots: SlotMap,
    scopes: Vec<ScopeState<T>>,
    honor_tags: bool,
    stamp_dvm: bool,
}

impl<T> Scheduler<T> {
    /// `scopes` must be disjoint ranges of the slot map; `stamp_dvm` writes
    /// the scope index into each placement's `dvm_id`.
    pub fn new(slots: SlotMap, scopes: Vec<Range<usize>>, honor_tags: bool, stamp_dvm: bool) -> Self {
        let cpn = u64::from(slots.cores_per_node());
        let gpn = u64::from(slots.gpus_per_node());
        let scopes = scopes
            .into_iter()
            .map(|r| {
                let free_cores = r.clone().map(|n| u64::from(slots.free_cores(n))).sum::<u64>();
                let free_gpus = r.clone().map(|n| u64::from(slots.free_gpus(n))).sum::<u64>();
                debug_assert!(free_cores <= r.len() as u64 * cpn && free_gpus <= r.len() as u64 * gpn);
                ScopeState {
                    scope: Scope { nodes: r, active: true },
                    waiting: VecDeque::new(),
                    free_cores,
                    free_gpus,
                }
            })
            .collect();
        Scheduler {
            slots,
            scopes,
            honor_tags,
            stamp_dvm,
        }
    }

    /// One scope covering every node.
    pub fn single(slots: SlotMap) -> Self {
        let n = slots.len();
        Scheduler::new(slots, vec![0..n], true, false)
    }

    pub fn slots(&self) -> &SlotMap {
        &self.slots
    }

    pub fn scopes(&self) -> Vec<Scope> {
        self.scopes.iter().map(|s| s.scope.clone()).collect()
    }

    pub fn waiting_len(&self) -> usize {
        self.scopes.iter().map(|s| s.waiting.len()).sum()
    }

    pub fn busy_len(&self) -> usize {
        self.slots.busy().len()
    }

    pub fn scope_of_node(&self, node: usize) -> Option<usize> {
        self.scopes.iter().position(|s| s.scope.nodes.contains(&node))
    }

    /// Scope a tagged request is pinned to, if its tag already resolves to
    /// nodes.
    pub fn pinned_scope(&self, td: &ValidatedDescription) -> Option<usize> {
        if !self.honor_tags {
            return None;
        }
        let nodes = self.slots.tag_nodes(td.tag.as_deref()?)?;
        self.scope_of_node(*nodes.first()?)
    }

    pub fn submit(&mut self, scope: usize, td: ValidatedDescription, payload: T) -> Admission<T> {
        if let Err(reason) = self.admissible(scope, &td) {
            return Admission::Rejected(reason, payload);
        }
        match self.try_place(scope, &td) {
            Ok(p) => Admission::Placed(p, payload),
            Err(_) => {
                self.scopes[scope].waiting.push_back(Entry { td, payload });
                Admission::Waiting
            }
        }
    }

    fn admissible(&self, scope: usize, td: &ValidatedDescription) -> Result<(), String> {
        let Some(s) = self.scopes.get(scope) else {
            return Err(format!("no scope {scope}"));
        };
        if !s.scope.active {
            return Err(format!("scope {scope} is not active"));
        }
        let cpn = self.slots.cores_per_node();
        let gpn = self.slots.gpus_per_node();
        validate_against_shape(td, s.scope.nodes.len() as u32, cpn, gpn).map_err(|e| e.to_string())?;
        if self.honor_tags {
            if let Some(nodes) = td.tag.as_deref().and_then(|t| self.slots.tag_nodes(t)) {
                if !nodes.iter().all(|n| s.scope.nodes.contains(n)) {
                    return Err(format!("tag {:?} is bound outside scope {scope}", td.tag.as_deref().unwrap_or("")));
                }
                validate_against_shape(td, nodes.len() as u32, cpn, gpn)
                    .map_err(|e| format!("tag {:?} nodes cannot hold the task: {e}", td.tag.as_deref().unwrap_or("")))?;
            }
        }
        Ok(())
    }

    fn try_place(&mut self, scope: usize, td: &ValidatedDescription) -> Result<Placement, AllocError> {
        let s = &mut self.scopes[scope];
        place_in(&mut self.slots, &s.scope, &mut s.free_cores, &mut s.free_gpus, td, scope, self.honor_tags, self.stamp_dvm)
    }

    /// Frees `p` without rescanning.
    pub fn release_quiet(&mut self, p: &Placement) -> Result<usize, AllocError> {
        let node = p
            .assignments
            .first()
            .map(|a| a.node_index)
            .ok_or_else(|| AllocError::UnknownPlacement(p.task_uid.clone()))?;
        let scope = self
            .scope_of_node(node)
            .ok_or_else(|| AllocError::UnknownPlacement(p.task_uid.clone()))?;
        self.slots.release(p)?;
        let s = &mut self.scopes[scope];
        s.free_cores += p.cores() as u64;
        s.free_gpus += p.gpus() as u64;
        Ok(scope)
    }

    /// Frees `p` and places whatever now fits from its scope's waiting list.
    pub fn release(&mut self, p: &Placement) -> Result<Vec<(Placement, T)>, AllocError> {
        let scope = self.release_quiet(p)?;
        Ok(self.rescan(scope))
    }

    /// FIFO first-fit pass over one scope's waiting list.
    pub fn rescan(&mut self, scope: usize) -> Vec<(Placement, T)> {
        let mut placed = Vec::new();
        if !self.scopes[scope].scope.active {
            return placed;
        }
        // (cores, gpus) of plain requests that did not fit during this pass
        let mut failed: Vec<(u32, u32)> = Vec::new();
        let mut i = 0;
        while i < self.scopes[scope].waiting.len() {
            if self.scopes[scope].free_cores == 0 {
                break;
            }
            let e = &self.scopes[scope].waiting[i];
            let plain = !e.td.uses_mpi && (e.td.tag.is_none() || !self.honor_tags);
            let (c, g) = (e.td.cores_per_task, e.td.gpus_per_task);
            if plain && failed.iter().any(|&(fc, fg)| fc <= c && fg <= g) {
                i += 1;
                continue;
            }
            let s = &mut self.scopes[scope];
            let res = place_in(
                &mut self.slots,
                &s.scope,
                &mut s.free_cores,
                &mut s.free_gpus,
                &s.waiting[i].td,
                scope,
                self.honor_tags,
                self.stamp_dvm,
            );
            match res {
                Ok(p) => {
                    let e = self.scopes[scope].waiting.remove(i).expect("index in range");
                    placed.push((p, e.payload));
                }
                Err(_) => {
                    if plain {
                        failed.push((c, g));
                    }
                    i += 1;
                }
            }
        }
        placed
    }

    /// Marks a scope inactive and hands back its waiting requests in order.
    pub fn deactivate(&mut self, scope: usize) -> Vec<(ValidatedDescription, T)> {
        let s = &mut self.scopes[scope];
        s.scope.active = false;
        s.waiting.drain(..).map(|e| (e.td, e.payload)).collect()
    }

    /// Removes every waiting request, in scope then FIFO order.
    pub fn drain_waiting(&mut self) -> Vec<(ValidatedDescription, T)> {
        self.scopes
            .iter_mut()
            .flat_map(|s| s.waiting.drain(..).collect::<Vec<_>>())
            .map(|e| (e.td, e.payload))
            .collect()
    }

    /// Removes one waiting request by uid.
    pub fn remove_waiting(&mut self, uid: &str) -> Option<(ValidatedDescription, T)> {
        for s in &mut self.scopes {
            if let Some(pos) = s.waiting.iter().position(|e| e.td.uid == uid) {
                let e = s.waiting.remove(pos).expect("position is valid");
                return Some((e.td, e.payload));
            }
        }
        None
    }
}

#[allow(clippy::too_many_arguments)]
fn place_in(
    slots: &mut SlotMap,
    scope: &Scope,
    free_cores: &mut u64,
    free_gpus: &mut u64,
    td: &ValidatedDescription,
    id: usize,
    honor_tags: bool,
    stamp_dvm: bool,
) -> Result<Placement, AllocError> {
    if u64::from(td.cores_per_task) > *free_cores || u64::from(td.gpus_per_task) > *free_gpus {
        return Err(AllocError::NoFit);
    }
    let mut p = slots.allocate_in(td, scope.nodes.clone(), honor_tags)?;
    if stamp_dvm {
        p.dvm_id = Some(id as u32);
        slots.stamp_dvm(&p.task_uid, id as u32);
    }
    *free_cores -= p.cores() as u64;
    *free_gpus -= p.gpus() as u64;
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pilot::PilotDescription;
    use crate::task::{validate_task_description, TaskDescription};

    fn vd(pd: &PilotDescription, uid: &str, c: u32) -> ValidatedDescription {
        validate_task_description(&TaskDescription::executable(uid, "x").with_cores(c), pd).unwrap()
    }

    #[test]
    fn pigeonhole_generations() {
        let pd = PilotDescription::simulated("p", 1, 8, 0);
        let mut s: Scheduler<usize> = Scheduler::single(SlotMap::new(&pd));
        let mut running = Vec::new();
        for i in 0..32 {
            if let Admission::Placed(p, id) = s.submit(0, vd(&pd, &format!("t{i}"), 1), i) {
                running.push((p, id));
            }
        }
        assert_eq!(running.len(), 8);
        assert_eq!(s.waiting_len(), 24);
        let mut generations = 1;
        while !running.is_empty() {
            let batch = std::mem::take(&mut running);
            let mut next = Vec::new();
            for (p, _) in batch {
                next.extend(s.release(&p).unwrap());
            }
            if !next.is_empty() {
                generations += 1;
                assert!(next.len() <= 8);
            }
            running = next;
        }
        assert_eq!(generations, 4);
    }

    #[test]
    fn waiting_runs_in_fifo_order() {
        let pd = PilotDescription::simulated("p", 1, 2, 0);
        let mut s: Scheduler<&str> = Scheduler::single(SlotMap::new(&pd));
        let Admission::Placed(p, _) = s.submit(0, vd(&pd, "big", 2), "big") else { panic!() };
        assert!(matches!(s.submit(0, vd(&pd, "a", 1), "a"), Admission::Waiting));
        assert!(matches!(s.submit(0, vd(&pd, "b", 1), "b"), Admission::Waiting));
        let placed = s.release(&p).unwrap();
        let order: Vec<&str> = placed.iter().map(|x| x.1).collect();
        assert_eq!(order, vec!["a", "b"]);
    }

    #[test]
    fn scopes_partition_and_stamp() {
        let pd = PilotDescription::simulated("p", 4, 2, 0);
        let mut s: Scheduler<()> = Scheduler::new(SlotMap::new(&pd), vec![0..2, 2..4], false, true);
        let Admission::Placed(p, _) = s.submit(1, vd(&pd, "t", 2), ()) else { panic!() };
        assert_eq!(p.dvm_id, Some(1));
        assert_eq!(p.assignments[0].node_index, 2);
        s.release(&p).unwrap();
        s.slots().check_consistency().unwrap();
        let mpi = TaskDescription::executable("mpi", "x").with_cores(6).with_mpi(true);
        let mpi = validate_task_description(&mpi, &pd).unwrap();
        assert!(matches!(s.submit(1, mpi, ()), Admission::Rejected(..)));
    }

    #[test]
    fn oversized_tag_request_is_rejected() {
        let pd = PilotDescription::simulated("p", 2, 4, 0);
        let mut s: Scheduler<()> = Scheduler::single(SlotMap::new(&pd));
        let a = validate_task_description(&TaskDescription::executable("a", "x").with_tag("A"), &pd).unwrap();
        assert!(matches!(s.submit(0, a, ()), Admission::Placed(..)));
        let big = TaskDescription::executable("b", "x").with_tag("A").with_cores(6).with_mpi(true);
        let big = validate_task_description(&big, &pd).unwrap();
        assert!(matches!(s.submit(0, big, ()), Admission::Rejected(..)));
    }

    #[test]
    fn deactivate_returns_waiting() {
        let pd = PilotDescription::simulated("p", 2, 1, 0);
        let mut s: Scheduler<u8> = Scheduler::new(SlotMap::new(&pd), vec![0..1, 1..2], false, true);
        assert!(matches!(s.submit(0, vd(&pd, "a", 1), 1), Admission::Placed(..)));
        assert!(matches!(s.submit(0, vd(&pd, "b", 1), 2), Admission::Waiting));
        let back = s.deactivate(0);
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].1, 2);
        assert!(matches!(s.submit(0, vd(&pd, "c", 1), 3), Admission::Rejected(..)));
    }
}
