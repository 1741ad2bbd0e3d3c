use std::collections::{BTreeSet, HashMap};
use std::ops::Range;

use thiserror::Error;

use super::{NodeAssignment, Placement};
use crate::pilot::{build_node_list, NodeList, PilotDescription, SlotState};
use crate::task::{TaskDescription, ValidatedDescription};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AllocError {
    #[error("no free slots fit the request")]
    NoFit,
    #[error("placement for task {0} is not held")]
    UnknownPlacement(String),
    #[error("task {0} already holds a placement")]
    AlreadyPlaced(String),
}

/// Max-tree over per-node values with a "first index >= x" query.
#[derive(Debug, Clone)]
struct MaxTree {
    size: usize,
    data: Vec<u32>,
}

impl MaxTree {
    fn new(values: &[u32]) -> Self {
        let size = values.len().next_power_of_two().max(1);
        let mut data = vec![0; 2 * size];
        data[size..size + values.len()].copy_from_slice(values);
        for i in (1..size).rev() {
            data[i] = data[2 * i].max(data[2 * i + 1]);
        }
        MaxTree { size, data }
    }

    fn set(&mut self, i: usize, v: u32) {
        let mut p = i + self.size;
        self.data[p] = v;
        while p > 1 {
            p /= 2;
            self.data[p] = self.data[2 * p].max(self.data[2 * p + 1]);
        }
    }

    /// Lowest index in `range` whose value is at least `x` (x >= 1).
    fn first_at_least(&self, range: Range<usize>, x: u32) -> Option<usize> {
        self.descend(1, 0, self.size, &range, x)
    }

    fn descend(&self, node: usize, lo: usize, hi: usize, r: &Range<usize>, x: u32) -> Option<usize> {
        if hi <= r.start || lo >= r.end || self.data[node] < x {
            return None;
        }
        if hi - lo == 1 {
            return Some(lo);
        }
        let mid = (lo + hi) / 2;
        self.descend(2 * node, lo, mid, r, x)
            .or_else(|| self.descend(2 * node + 1, mid, hi, r, x))
    }
}

/// Which nodes a request may use.
#[derive(Debug, Clone, Copy)]
enum Filter<'a> {
    Any,
    /// Sorted node indices.
    Only(&'a [usize]),
    PreferUnbound,
}

/// Core/gpu occupancy of every node plus the placements holding them.
#[derive(Debug, Clone)]
pub struct SlotMap {
    node_list: NodeList,
    cores_per_node: u32,
    gpus_per_node: u32,
    free_cores: Vec<u32>,
    free_gpus: Vec<u32>,
    /// Nodes with at least one free core.
    nonempty: BTreeSet<usize>,
    /// `trees[k][n]` is node n's free cores if it has at least k free gpus.
    trees: Vec<MaxTree>,
    busy: HashMap<String, Placement>,
    tags: HashMap<String, Vec<usize>>,
    tag_bound: Vec<bool>,
    free_total_cores: u64,
    free_total_gpus: u64,
}

impl SlotMap {
    pub fn new(pd: &PilotDescription) -> Self {
        Self::from_node_list(build_node_list(pd), pd.cores_per_node, pd.gpus_per_node)
    }

    pub fn from_node_list(node_list: NodeList, cores_per_node: u32, gpus_per_node: u32) -> Self {
        let free_cores: Vec<u32> = node_list.nodes.iter().map(|n| n.free_cores() as u32).collect();
        let free_gpus: Vec<u32> = node_list.nodes.iter().map(|n| n.free_gpus() as u32).collect();
        let trees = (0..=gpus_per_node)
            .map(|k| {
                let vals: Vec<u32> = free_cores
                    .iter()
                    .zip(&free_gpus)
                    .map(|(&c, &g)| if g >= k { c } else { 0 })
                    .collect();
                MaxTree::new(&vals)
            })
            .collect();
        let nonempty = (0..free_cores.len()).filter(|&i| free_cores[i] > 0).collect();
        let free_total_cores = free_cores.iter().map(|&c| u64::from(c)).sum();
        let free_total_gpus = free_gpus.iter().map(|&g| u64::from(g)).sum();
        let n = free_cores.len();
        SlotMap {
            node_list,
            cores_per_node,
            gpus_per_node,
            free_cores,
            free_gpus,
            nonempty,
            trees,
            busy: HashMap::new(),
            tags: HashMap::new(),
            tag_bound: vec![false; n],
            free_total_cores,
            free_total_gpus,
        }
    }

    pub fn node_list(&self) -> &NodeList {
        &self.node_list
    }

    pub fn len(&self) -> usize {
        self.free_cores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.free_cores.is_empty()
    }

    pub fn cores_per_node(&self) -> u32 {
        self.cores_per_node
    }

    pub fn gpus_per_node(&self) -> u32 {
        self.gpus_per_node
    }

    pub fn free_cores(&self, node: usize) -> u32 {
        self.free_cores[node]
    }

    pub fn free_gpus(&self, node: usize) -> u32 {
        self.free_gpus[node]
    }

    pub fn free_total_cores(&self) -> u64 {
        self.free_total_cores
    }

    pub fn free_total_gpus(&self) -> u64 {
        self.free_total_gpus
    }

    pub fn busy(&self) -> &HashMap<String, Placement> {
        &self.busy
    }

    pub fn is_busy(&self, uid: &str) -> bool {
        self.busy.contains_key(uid)
    }

    /// Nodes bound to `tag`, if it has been used or names a node.
    pub fn tag_nodes(&self, tag: &str) -> Option<Vec<usize>> {
        if let Some(i) = self.node_list.index_of(tag) {
            return Some(vec![i]);
        }
        self.tags.get(tag).cloned()
    }

    /// Recounts the occupancy vectors against the busy placements.
    pub fn check_consistency(&self) -> Result<(), String> {
        let mut owners: Vec<Vec<u32>> = self
            .node_list
            .nodes
            .iter()
            .map(|n| vec![0; n.core_states.len() + n.gpu_states.len()])
            .collect();
        for p in self.busy.values() {
            for a in &p.assignments {
                let node = &self.node_list.nodes[a.node_index];
                for &c in &a.core_indices {
                    owners[a.node_index][c as usize] += 1;
                }
                for &g in &a.gpu_indices {
                    owners[a.node_index][node.core_states.len() + g as usize] += 1;
                }
            }
        }
        for (i, node) in self.node_list.nodes.iter().enumerate() {
            let states = node.core_states.iter().chain(&node.gpu_states);
            for (slot, state) in states.enumerate() {
                let n = owners[i][slot];
                let busy = *state == SlotState::Busy;
                if n > 1 || busy != (n == 1) {
                    return Err(format!("node {i} slot {slot}: state {state:?} with {n} owners"));
                }
            }
            if node.free_cores() as u32 != self.free_cores[i] || node.free_gpus() as u32 != self.free_gpus[i] {
                return Err(format!("node {i}: free counters out of sync"));
            }
        }
        Ok(())
    }

    /// Places `td` on nodes in `scope`. Tags pin to nodes when
    /// `honor_tags` is set.
    pub fn allocate_in(
        &mut self,
        td: &TaskDescription,
        scope: Range<usize>,
        honor_tags: bool,
    ) -> Result<Placement, AllocError> {
        if self.busy.contains_key(&td.uid) {
            return Err(AllocError::AlreadyPlaced(td.uid.clone()));
        }
        let tag = if honor_tags { td.tag.as_deref() } else { None };
        let Some(tag) = tag else {
            return self.place(td, scope, Filter::Any);
        };
        if let Some(idx) = self.node_list.index_of(tag) {
            return self.place(td, scope, Filter::Only(&[idx]));
        }
        if let Some(bound) = self.tags.get(tag).cloned() {
            return self.place(td, scope, Filter::Only(&bound));
        }
        let p = match self.place(td, scope.clone(), Filter::PreferUnbound) {
            Ok(p) => p,
            Err(_) => self.place(td, scope, Filter::Any)?,
        };
        let nodes: Vec<usize> = p.assignments.iter().map(|a| a.node_index).collect();
        for &n in &nodes {
            self.tag_bound[n] = true;
        }
        self.tags.insert(tag.to_string(), nodes);
        Ok(p)
    }

    fn place(&mut self, td: &TaskDescription, scope: Range<usize>, filter: Filter<'_>) -> Result<Placement, AllocError> {
        let c = td.cores_per_task;
        let g = td.gpus_per_task;
        if u64::from(c) > self.free_total_cores || u64::from(g) > self.free_total_gpus {
            return Err(AllocError::NoFit);
        }
        let takes: Vec<(usize, u32, u32)> = if td.uses_mpi {
            self.find_mpi(c, g, scope, filter).ok_or(AllocError::NoFit)?
        } else {
            let node = self.find_single(c, g, scope, filter).ok_or(AllocError::NoFit)?;
            vec![(node, c, g)]
        };
        let assignments = takes
            .into_iter()
            .map(|(node, nc, ng)| self.take(node, nc, ng))
            .collect();
        let p = Placement {
            task_uid: td.uid.clone(),
            assignments,
            dvm_id: None,
        };
        self.busy.insert(td.uid.clone(), p.clone());
        Ok(p)
    }

    fn fits(&self, n: usize, c: u32, g: u32) -> bool {
        self.free_cores[n] >= c && self.free_gpus[n] >= g
    }

    fn find_single(&self, c: u32, g: u32, scope: Range<usize>, filter: Filter<'_>) -> Option<usize> {
        match filter {
            Filter::Any => {
                if g > self.gpus_per_node {
                    return None;
                }
                self.trees[g as usize].first_at_least(scope, c.max(1))
            }
            Filter::Only(nodes) => nodes
                .iter()
                .copied()
                .find(|&n| scope.contains(&n) && self.fits(n, c, g)),
            Filter::PreferUnbound => self
                .nonempty
                .range(scope)
                .copied()
                .find(|&n| !self.tag_bound[n] && self.fits(n, c, g)),
        }
    }

    /// Contiguous span first, then the lowest-index free nodes.
    fn find_mpi(&self, c: u32, g: u32, scope: Range<usize>, filter: Filter<'_>) -> Option<Vec<(usize, u32, u32)>> {
        let cand: Vec<usize> = match filter {
            Filter::Any => self.nonempty.range(scope).copied().collect(),
            Filter::Only(nodes) => nodes
                .iter()
                .copied()
                .filter(|n| scope.contains(n) && self.free_cores[*n] > 0)
                .collect(),
            Filter::PreferUnbound => self
                .nonempty
                .range(scope)
                .copied()
                .filter(|&n| !self.tag_bound[n])
                .collect(),
        };
        let mut i = 0;
        while i < cand.len() {
            let mut need = c;
            let mut j = i;
            while j < cand.len() && (j == i || cand[j] == cand[j - 1] + 1) {
                need -= need.min(self.free_cores[cand[j]]);
                if need == 0 {
                    break;
                }
                j += 1;
            }
            if need > 0 {
                // the rest of this run cannot reach c either
                i = j.max(i + 1);
                continue;
            }
            if let Some(t) = self.greedy(&cand[i..=j], c, g) {
                return Some(t);
            }
            i += 1;
        }
        self.greedy(&cand, c, g)
    }

    fn greedy(&self, nodes: &[usize], c: u32, g: u32) -> Option<Vec<(usize, u32, u32)>> {
        let mut out = Vec::new();
        let mut need_c = c;
        let mut need_g = g;
        for &n in nodes {
            if need_c == 0 {
                break;
            }
            let tc = need_c.min(self.free_cores[n]);
            if tc == 0 {
                continue;
            }
            let tg = need_g.min(self.free_gpus[n]);
            need_c -= tc;
            need_g -= tg;
            out.push((n, tc, tg));
        }
        (need_c == 0 && need_g == 0).then_some(out)
    }

    fn take(&mut self, n: usize, c: u32, g: u32) -> NodeAssignment {
        let node = &mut self.node_list.nodes[n];
        let mut core_indices = Vec::with_capacity(c as usize);
        for (i, s) in node.core_states.iter_mut().enumerate() {
            if core_indices.len() == c as usize {
                break;
            }
            if *s == SlotState::Free {
                *s = SlotState::Busy;
                core_indices.push(i as u32);
            }
        }
        let mut gpu_indices = Vec::with_capacity(g as usize);
        for (i, s) in node.gpu_states.iter_mut().enumerate() {
            if gpu_indices.len() == g as usize {
                break;
            }
            if *s == SlotState::Free {
                *s = SlotState::Busy;
                gpu_indices.push(i as u32);
            }
        }
        self.adjust(n, -(c as i64), -(g as i64));
        NodeAssignment {
            node_index: n,
            core_indices,
            gpu_indices,
        }
    }

    fn adjust(&mut self, n: usize, dc: i64, dg: i64) {
        self.free_cores[n] = (i64::from(self.free_cores[n]) + dc) as u32;
        self.free_gpus[n] = (i64::from(self.free_gpus[n]) + dg) as u32;
        self.free_total_cores = (self.free_total_cores as i64 + dc) as u64;
        self.free_total_gpus = (self.free_total_gpus as i64 + dg) as u64;
        if self.free_cores[n] > 0 {
            self.nonempty.insert(n);
        } else {
            self.nonempty.remove(&n);
        }
        let fc = self.free_cores[n];
        let fg = self.free_gpus[n];
        for (k, tree) in self.trees.iter_mut().enumerate() {
            tree.set(n, if fg >= k as u32 { fc } else { 0 });
        }
    }

    pub(crate) fn stamp_dvm(&mut self, uid: &str, dvm: u32) {
        if let Some(p) = self.busy.get_mut(uid) {
            p.dvm_id = Some(dvm);
        }
    }

    /// Frees the slots of a held placement.
    pub fn release(&mut self, p: &Placement) -> Result<(), AllocError> {
        match self.busy.get(&p.task_uid) {
            Some(held) if held.assignments == p.assignments => {}
            _ => return Err(AllocError::UnknownPlacement(p.task_uid.clone())),
        }
        let held = self.busy.remove(&p.task_uid).expect("checked above");
        for a in &held.assignments {
            let node = &mut self.node_list.nodes[a.node_index];
            for &c in &a.core_indices {
                node.core_states[c as usize] = SlotState::Free;
            }
            for &g in &a.gpu_indices {
                node.gpu_states[g as usize] = SlotState::Free;
            }
            self.adjust(a.node_index, a.core_indices.len() as i64, a.gpu_indices.len() as i64);
        }
        Ok(())
    }
}

/// First-fit placement over the whole map, ignoring tags.
pub fn allocate_continuous(req: &ValidatedDescription, sm: &mut SlotMap) -> Result<Placement, AllocError> {
    let all = 0..sm.len();
    if sm.busy.contains_key(&req.uid) {
        return Err(AllocError::AlreadyPlaced(req.uid.clone()));
    }
    sm.place(req, all, Filter::Any)
}

/// Placement restricted to the nodes bound to `tag`; the first use of a
/// tag binds it to whatever nodes it lands on.
pub fn allocate_tagged(req: &ValidatedDescription, sm: &mut SlotMap, tag: &str) -> Result<Placement, AllocError> {
    let mut td: TaskDescription = (**req).clone();
    td.tag = Some(tag.to_string());
    let all = 0..sm.len();
    sm.allocate_in(&td, all, true)
}

pub fn release_slots(p: &Placement, sm: &mut SlotMap) -> Result<(), AllocError> {
    sm.release(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::validate_task_description;

    fn map(nodes: u32, cores: u32, gpus: u32) -> (PilotDescription, SlotMap) {
        let pd = PilotDescription::simulated("p", nodes, cores, gpus);
        let sm = SlotMap::new(&pd);
        (pd, sm)
    }

    fn req(pd: &PilotDescription, uid: &str, c: u32, g: u32, mpi: bool) -> ValidatedDescription {
        let td = TaskDescription::executable(uid, "x").with_cores(c).with_gpus(g).with_mpi(mpi);
        validate_task_description(&td, pd).unwrap()
    }

    fn cores_of(p: &Placement) -> Vec<(usize, Vec<u32>)> {
        p.assignments.iter().map(|a| (a.node_index, a.core_indices.clone())).collect()
    }

    #[test]
    fn mpi_spans_consecutive_nodes() {
        let (pd, mut sm) = map(2, 4, 0);
        let p = allocate_continuous(&req(&pd, "t", 6, 0, true), &mut sm).unwrap();
        assert_eq!(cores_of(&p), vec![(0, vec![0, 1, 2, 3]), (1, vec![0, 1])]);
    }

    #[test]
    fn no_fit_when_node_partly_busy() {
        let (pd, mut sm) = map(1, 4, 0);
        allocate_continuous(&req(&pd, "a", 2, 0, false), &mut sm).unwrap();
        assert_eq!(allocate_continuous(&req(&pd, "b", 4, 0, false), &mut sm), Err(AllocError::NoFit));
    }

    #[test]
    fn release_restores_initial_state() {
        let (pd, mut sm) = map(3, 4, 2);
        let before = sm.node_list().clone();
        let p = allocate_continuous(&req(&pd, "t", 9, 3, true), &mut sm).unwrap();
        assert_eq!(p.cores(), 9);
        assert_eq!(p.gpus(), 3);
        release_slots(&p, &mut sm).unwrap();
        assert_eq!(sm.node_list(), &before);
        assert_eq!(sm.free_total_cores(), 12);
        assert_eq!(release_slots(&p, &mut sm), Err(AllocError::UnknownPlacement("t".into())));
    }

    #[test]
    fn gpus_come_from_the_task_nodes() {
        let (pd, mut sm) = map(2, 2, 1);
        // node0 has no free gpu left but free cores
        allocate_continuous(&req(&pd, "g", 1, 1, false), &mut sm).unwrap();
        let p = allocate_continuous(&req(&pd, "t", 1, 1, false), &mut sm).unwrap();
        assert_eq!(p.assignments[0].node_index, 1);
        assert_eq!(p.assignments[0].gpu_indices, vec![0]);
    }

    #[test]
    fn fragmented_mpi_falls_back_to_lowest_free_nodes() {
        let (pd, mut sm) = map(3, 2, 0);
        allocate_continuous(&req(&pd, "mid", 2, 0, false), &mut sm).unwrap();
        // node1 full: no two consecutive nodes are free
        let mid = sm.busy()["mid"].clone();
        release_slots(&mid, &mut sm).unwrap();
        allocate_continuous(&req(&pd, "a", 2, 0, false), &mut sm).unwrap();
        allocate_continuous(&req(&pd, "b", 2, 0, false), &mut sm).unwrap();
        let a = sm.busy()["a"].clone();
        release_slots(&a, &mut sm).unwrap();
        allocate_continuous(&req(&pd, "c", 1, 0, false), &mut sm).unwrap();
        // nodes: 0 has 1 free, 1 full, 2 free
        let p = allocate_continuous(&req(&pd, "m", 3, 0, true), &mut sm).unwrap();
        assert_eq!(cores_of(&p), vec![(0, vec![1]), (2, vec![0, 1])]);
        sm.check_consistency().unwrap();
    }

    #[test]
    fn tag_reuses_its_first_node() {
        let (pd, mut sm) = map(2, 4, 0);
        let a1 = allocate_tagged(&req(&pd, "a1", 2, 0, false), &mut sm, "A").unwrap();
        let a2 = allocate_tagged(&req(&pd, "a2", 2, 0, false), &mut sm, "A").unwrap();
        assert_eq!(cores_of(&a1), vec![(0, vec![0, 1])]);
        assert_eq!(cores_of(&a2), vec![(0, vec![2, 3])]);
        assert_eq!(allocate_tagged(&req(&pd, "a3", 1, 0, false), &mut sm, "A"), Err(AllocError::NoFit));
    }

    #[test]
    fn distinct_tags_get_distinct_nodes() {
        let (pd, mut sm) = map(2, 4, 0);
        let a = allocate_tagged(&req(&pd, "a", 1, 0, false), &mut sm, "A").unwrap();
        let b = allocate_tagged(&req(&pd, "b", 1, 0, false), &mut sm, "B").unwrap();
        assert_ne!(a.assignments[0].node_index, b.assignments[0].node_index);
    }

    #[test]
    fn node_name_tag_pins() {
        let (pd, mut sm) = map(3, 4, 0);
        let p = allocate_tagged(&req(&pd, "a", 1, 0, false), &mut sm, "node00002").unwrap();
        assert_eq!(p.assignments[0].node_index, 2);
    }

    #[test]
    fn scope_limits_search() {
        let (pd, mut sm) = map(4, 2, 0);
        let td = req(&pd, "t", 2, 0, false);
        let p = sm.allocate_in(&td, 2..4, false).unwrap();
        assert_eq!(p.assignments[0].node_index, 2);
        let td = req(&pd, "m", 4, 0, true);
        assert_eq!(sm.allocate_in(&td, 2..4, false), Err(AllocError::NoFit));
    }

    #[test]
    fn max_tree_query() {
        let t = MaxTree::new(&[0, 3, 1, 5, 2]);
        assert_eq!(t.first_at_least(0..5, 2), Some(1));
        assert_eq!(t.first_at_least(2..5, 2), Some(3));
        assert_eq!(t.first_at_least(4..5, 3), None);
        assert_eq!(t.first_at_least(0..5, 6), None);
    }
}
