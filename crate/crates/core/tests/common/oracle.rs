//! Brute-force first-fit placement over explicit free/busy flags, used to
//! check the indexed slot map.

use pilotkit::pilot::{build_node_list, PilotDescription};
use pilotkit::scheduler::{allocate_continuous, release_slots, NodeAssignment, Placement, SlotMap};
use pilotkit::task::{validate_task_description, TaskDescription};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Oracle {
    cores: Vec<Vec<bool>>,
    gpus: Vec<Vec<bool>>,
}

impl Oracle {
    pub fn new(nodes: usize, cpn: usize, gpn: usize) -> Self {
        Oracle {
            cores: vec![vec![false; cpn]; nodes],
            gpus: vec![vec![false; gpn]; nodes],
        }
    }

    fn free_c(&self, n: usize) -> u32 {
        self.cores[n].iter().filter(|b| !**b).count() as u32
    }

    fn free_g(&self, n: usize) -> u32 {
        self.gpus[n].iter().filter(|b| !**b).count() as u32
    }

    /// Cores and gpus taken per node when filling `nodes` in order.
    fn fill(&self, nodes: &[usize], c: u32, g: u32) -> Option<Vec<(usize, u32, u32)>> {
        let (mut nc, mut ng) = (c, g);
        let mut out = Vec::new();
        for &n in nodes {
            if nc == 0 {
                break;
            }
            let tc = nc.min(self.free_c(n));
            if tc == 0 {
                continue;
            }
            let tg = ng.min(self.free_g(n));
            nc -= tc;
            ng -= tg;
            out.push((n, tc, tg));
        }
        (nc == 0 && ng == 0).then_some(out)
    }

    pub fn place(&mut self, td: &TaskDescription) -> Option<Placement> {
        let (c, g) = (td.cores_per_task, td.gpus_per_task);
        let n = self.cores.len();
        let takes = if !td.uses_mpi {
            let node = (0..n).find(|&i| self.free_c(i) >= c && self.free_g(i) >= g)?;
            vec![(node, c, g)]
        } else {
            // every run of adjacent nodes with free cores, shortest prefix
            // that holds c cores, earliest start first
            let mut found = None;
            'outer: for s in 0..n {
                let mut sum = 0;
                for e in s..n {
                    if self.free_c(e) == 0 {
                        break;
                    }
                    sum += self.free_c(e);
                    if sum >= c {
                        if self.free_c(s) > 0 {
                            let span: Vec<usize> = (s..=e).collect();
                            if let Some(t) = self.fill(&span, c, g) {
                                found = Some(t);
                                break 'outer;
                            }
                        }
                        break;
                    }
                }
            }
            match found {
                Some(t) => t,
                None => self.fill(&(0..n).collect::<Vec<_>>(), c, g)?,
            }
        };
        let mut assignments = Vec::new();
        for (node, tc, tg) in takes {
            let take = |v: &mut Vec<bool>, k: u32| {
                let mut ix = Vec::new();
                for (i, b) in v.iter_mut().enumerate() {
                    if ix.len() == k as usize {
                        break;
                    }
                    if !*b {
                        *b = true;
                        ix.push(i as u32);
                    }
                }
                ix
            };
            let core_indices = take(&mut self.cores[node], tc);
            let gpu_indices = take(&mut self.gpus[node], tg);
            assignments.push(NodeAssignment {
                node_index: node,
                core_indices,
                gpu_indices,
            });
        }
        Some(Placement {
            task_uid: td.uid.clone(),
            assignments,
            dvm_id: None,
        })
    }

    pub fn release(&mut self, p: &Placement) {
        for a in &p.assignments {
            for &c in &a.core_indices {
                self.cores[a.node_index][c as usize] = false;
            }
            for &g in &a.gpu_indices {
                self.gpus[a.node_index][g as usize] = false;
            }
        }
    }
}

/// One randomized instance: up to 6 nodes × 8 cores × 2 gpus and 20 tasks
/// with releases mixed in. Returns the number of placements compared.
pub fn check_instance(seed: u64) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nodes = rng.gen_range(1..=6u32);
    let cpn = rng.gen_range(1..=8u32);
    let gpn = rng.gen_range(0..=2u32);
    let pd = PilotDescription::simulated("p", nodes, cpn, gpn);
    let mut sm = SlotMap::from_node_list(build_node_list(&pd), cpn, gpn);
    let mut oracle = Oracle::new(nodes as usize, cpn as usize, gpn as usize);
    let mut held: Vec<Placement> = Vec::new();
    let mut compared = 0;
    for i in 0..rng.gen_range(1..=20) {
        if !held.is_empty() && rng.gen_bool(0.3) {
            let p = held.swap_remove(rng.gen_range(0..held.len()));
            release_slots(&p, &mut sm).map_err(|e| e.to_string())?;
            oracle.release(&p);
        }
        let mpi = rng.gen_bool(0.3);
        let cores = rng.gen_range(1..=if mpi { cpn * nodes } else { cpn });
        let gpus = rng.gen_range(0..=gpn);
        let td = TaskDescription::executable(format!("t{i}"), "x")
            .with_cores(cores)
            .with_gpus(gpus)
            .with_mpi(mpi);
        let Ok(v) = validate_task_description(&td, &pd) else { continue };
        let got = allocate_continuous(&v, &mut sm).ok();
        let want = oracle.place(&td);
        if got != want {
            return Err(format!(
                "seed {seed}: {nodes}x{cpn}c{gpn}g task {} ({cores}c {gpus}g mpi={mpi}): got {got:?}, oracle {want:?}",
                td.uid
            ));
        }
        compared += 1;
        held.extend(got);
    }
    Ok(compared)
}
