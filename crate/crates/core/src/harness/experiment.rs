//! Experiment specs and the driver that runs them cell by cell.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics::{self, PlotFormat, SeriesSource};
use crate::client::{PilotManager, Session, TaskManager};
use crate::config::SessionConfig;
use crate::executor::{derive_seed, normal_clamped};
use crate::pilot::{DvmFailure, DvmPolicy, Fabric, LatencyModel, PilotDescription};
use crate::raptor::{self, FunctionCall, MasterConfig};
use crate::task::{TaskDescription, TaskState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Weak,
    Strong,
    HeteroWeak,
    HeteroStrong,
    Raptor,
}

impl ExperimentKind {
    fn is_weak(self) -> bool {
        matches!(self, ExperimentKind::Weak | ExperimentKind::HeteroWeak)
    }

    fn is_strong(self) -> bool {
        matches!(self, ExperimentKind::Strong | ExperimentKind::HeteroStrong)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::Weak => "weak",
            ExperimentKind::Strong => "strong",
            ExperimentKind::HeteroWeak => "hetero_weak",
            ExperimentKind::HeteroStrong => "hetero_strong",
            ExperimentKind::Raptor => "raptor",
        }
    }
}

/// Inclusive integer range, drawn uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Range {
    pub min: u32,
    pub max: u32,
}

impl Range {
    pub fn fixed(v: u32) -> Self {
        Range { min: v, max: v }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> u32 {
        if self.min >= self.max {
            self.min
        } else {
            rng.gen_range(self.min..=self.max)
        }
    }

    fn label(&self) -> String {
        if self.min == self.max {
            self.min.to_string()
        } else {
            format!("{}..{}", self.min, self.max)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "snake_case")]
pub enum DurationDist {
    /// Normal, clamped at zero.
    Normal { mean_s: f64, std_s: f64 },
    Uniform { min_s: f64, max_s: f64 },
}

impl DurationDist {
    fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            DurationDist::Normal { mean_s, std_s } => normal_clamped(rng, mean_s, std_s),
            DurationDist::Uniform { min_s, max_s } if max_s > min_s => rng.gen_range(min_s..max_s),
            DurationDist::Uniform { min_s, .. } => min_s,
        }
    }

    fn label(&self) -> String {
        match *self {
            DurationDist::Normal { mean_s, std_s } => format!("{mean_s}+-{std_s}"),
            DurationDist::Uniform { min_s, max_s } => format!("{min_s}..{max_s}"),
        }
    }

    fn valid(&self) -> bool {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        match *self {
            DurationDist::Normal { mean_s, std_s } => ok(mean_s) && ok(std_s),
            DurationDist::Uniform { min_s, max_s } => ok(min_s) && ok(max_s) && min_s <= max_s,
        }
    }
}

/// Master/worker layout and call load of a raptor cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaptorSpec {
    pub masters: u32,
    pub workers_per_master: u32,
    pub cores_per_worker: u32,
    pub calls: u64,
    #[serde(default = "default_function")]
    pub function: String,
    #[serde(default)]
    pub payload: String,
}

fn default_function() -> String {
    "noop".into()
}

fn default_one() -> u32 {
    1
}

fn default_bin() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

fn default_dvm_max() -> u32 {
    256
}

fn default_duration() -> DurationDist {
    DurationDist::Uniform { min_s: 0.0, max_s: 0.0 }
}

fn default_cores() -> Range {
    Range::fixed(1)
}

fn default_gpus() -> Range {
    Range::fixed(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: String,
    pub kind: ExperimentKind,
    #[serde(default = "default_fabric")]
    pub fabric: Fabric,
    /// Node count of each pilot size; one cell per entry.
    pub nodes: Vec<u32>,
    pub cores_per_node: u32,
    #[serde(default)]
    pub gpus_per_node: u32,
    /// Tasks per cell: one entry for all cells, or one per pilot size.
    #[serde(default)]
    pub task_counts: Vec<u64>,
    #[serde(default = "default_cores")]
    pub cores_per_task: Range,
    #[serde(default = "default_gpus")]
    pub gpus_per_task: Range,
    /// Share of tasks flagged MPI.
    #[serde(default)]
    pub mpi_fraction: f64,
    /// Unused by raptor cells.
    #[serde(default = "default_duration")]
    pub duration: DurationDist,
    #[serde(default)]
    pub latency: LatencyModel,
    #[serde(default = "default_dvm_max")]
    pub dvm_max_nodes: u32,
    #[serde(default)]
    pub dvm_policy: DvmPolicy,
    #[serde(default)]
    pub dvm_failures: Vec<DvmFailure>,
    #[serde(default)]
    pub raptor: Option<RaptorSpec>,
    #[serde(default = "default_one")]
    pub repetitions: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_bin")]
    pub bin_width_s: f64,
    #[serde(default = "default_true")]
    pub tracing: bool,
    /// Per-cell wait bound in wall seconds.
    #[serde(default)]
    pub timeout_s: Option<f64>,
    #[serde(default)]
    pub emulator_path: Option<PathBuf>,
    /// Write per-cell report files and plots next to each session.
    #[serde(default)]
    pub plots: bool,
}

fn default_fabric() -> Fabric {
    Fabric::Simulated
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment spec: {0}")]
    Invalid(String),
    #[error("cannot read spec {path}: {reason}")]
    Read { path: PathBuf, reason: String },
    #[error("cannot write {path}: {reason}")]
    Write { path: PathBuf, reason: String },
}

impl ExperimentSpec {
    pub fn from_file(path: &Path) -> Result<Self, ExperimentError> {
        let read = |reason: String| ExperimentError::Read {
            path: path.to_path_buf(),
            reason,
        };
        let text = std::fs::read_to_string(path).map_err(|e| read(e.to_string()))?;
        let spec: ExperimentSpec = serde_json::from_str(&text).map_err(|e| read(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn pilot_cores(&self, cell: usize) -> u64 {
        u64::from(self.nodes[cell]) * u64::from(self.cores_per_node)
    }

    pub fn task_count(&self, cell: usize) -> u64 {
        match self.task_counts.as_slice() {
            [] => 0,
            [n] => *n,
            v => v[cell],
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Invalid(m));
        if self.nodes.is_empty() || self.nodes.contains(&0) {
            return bad("nodes must list at least one positive node count".into());
        }
        if self.cores_per_node == 0 {
            return bad("cores_per_node must be positive".into());
        }
        if self.task_counts.len() > 1 && self.task_counts.len() != self.nodes.len() {
            return bad(format!("{} task counts for {} pilot sizes", self.task_counts.len(), self.nodes.len()));
        }
        if self.repetitions == 0 {
            return bad("repetitions must be positive".into());
        }
        if !self.duration.valid() {
            return bad("duration must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.mpi_fraction) {
            return bad("mpi_fraction must lie in [0, 1]".into());
        }
        if !(self.bin_width_s.is_finite() && self.bin_width_s > 0.0) {
            return bad("bin_width_s must be positive".into());
        }
        if self.cores_per_task.min == 0 || self.cores_per_task.min > self.cores_per_task.max {
            return bad("cores_per_task must be a positive range".into());
        }
        if self.gpus_per_task.min > self.gpus_per_task.max || self.gpus_per_task.max > self.gpus_per_node {
            return bad("gpus_per_task must fit on one node".into());
        }
        if self.kind == ExperimentKind::Raptor {
            let Some(r) = &self.raptor else {
                return bad("raptor experiments need a raptor section".into());
            };
            if self.fabric != Fabric::Local {
                return bad("raptor experiments run on the local fabric".into());
            }
            if r.masters == 0 || r.workers_per_master == 0 || r.cores_per_worker == 0 {
                return bad("raptor masters, workers and cores must be positive".into());
            }
            return Ok(());
        }
        if self.task_counts.is_empty() {
            return bad("task_counts is empty".into());
        }
        let n = self.nodes.len();
        if self.kind.is_weak() {
            // tasks_i / cores_i == tasks_0 / cores_0
            let (t0, c0) = (self.task_count(0), self.pilot_cores(0));
            if let Some(i) = (1..n).find(|&i| self.task_count(i) * c0 != t0 * self.pilot_cores(i)) {
                return bad(format!("weak scaling needs a constant tasks/cores ratio; cell {i} breaks it"));
            }
        }
        if self.kind.is_strong() && (1..n).any(|i| self.task_count(i) != self.task_count(0)) {
            return bad("strong scaling needs the same task count in every cell".into());
        }
        Ok(())
    }

    /// Generations a homogeneous workload needs when every core is usable.
    pub fn expected_generations(&self, cell: usize) -> u64 {
        let need = self.task_count(cell) * u64::from(self.cores_per_task.max);
        need.div_ceil(self.pilot_cores(cell).max(1))
    }

    fn pilot(&self, cell: usize, rep: u32) -> PilotDescription {
        let mut pd = PilotDescription::new(format!("pilot.{cell:02}.{rep:02}"), self.fabric);
        pd.nodes = self.nodes[cell];
        pd.cores_per_node = self.cores_per_node;
        pd.gpus_per_node = self.gpus_per_node;
        pd.launcher_latency_model = self.latency;
        pd.dvm_max_nodes = self.dvm_max_nodes;
        pd.dvm_policy = self.dvm_policy;
        pd.dvm_failures = self.dvm_failures.clone();
        pd.oversubscribe = self.fabric == Fabric::Local;
        pd
    }

    /// The task list of one cell and repetition; the same seed gives the
    /// same list.
    pub fn tasks(&self, cell: usize, rep: u32) -> Vec<TaskDescription> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &format!("tasks.{cell}.{rep}")));
        (0..self.task_count(cell))
            .map(|i| {
                let mpi = self.mpi_fraction > 0.0 && rng.gen_bool(self.mpi_fraction);
                let mut cores = self.cores_per_task.draw(&mut rng);
                if !mpi {
                    cores = cores.min(self.cores_per_node);
                }
                let gpus = self.gpus_per_task.draw(&mut rng);
                let secs = self.duration.draw(&mut rng);
                TaskDescription::executable(format!("task.{i:06}"), "pilotkit-emulate")
                    .with_args(["--duration".to_string(), format!("{secs:.6}")])
                    .with_cores(cores)
                    .with_gpus(gpus)
                    .with_mpi(mpi)
            })
            .collect()
    }
}

/// Outcome of one cell and repetition.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunResult {
    pub cell: usize,
    pub rep: u32,
    pub session_dir: PathBuf,
    pub tasks: u64,
    pub done: u64,
    pub failed: u64,
    pub ttx_s: f64,
    pub ru_pct: f64,
    pub ovh_pct: f64,
    pub generations: u64,
    pub replay_clean: bool,
    pub residual_us: i64,
    /// Raptor cells: calls with a result, completions per second and peak
    /// call concurrency.
    pub calls_ok: u64,
    pub call_rate: f64,
    pub call_concurrency: f64,
    pub wall_s: f64,
    pub error: Option<String>,
}

impl RunResult {
    fn new(cell: usize, rep: u32) -> Self {
        RunResult {
            cell,
            rep,
            session_dir: PathBuf::new(),
            tasks: 0,
            done: 0,
            failed: 0,
            ttx_s: 0.0,
            ru_pct: 0.0,
            ovh_pct: 0.0,
            generations: 0,
            replay_clean: false,
            residual_us: 0,
            calls_ok: 0,
            call_rate: 0.0,
            call_concurrency: 0.0,
            wall_s: 0.0,
            error: None,
        }
    }

    pub fn ok(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub spec: ExperimentSpec,
    pub runs: Vec<RunResult>,
    pub summary: PathBuf,
}

fn session_config(spec: &ExperimentSpec, cell: usize, rep: u32) -> SessionConfig {
    let mut cfg = SessionConfig::default()
        .with_seed(derive_seed(spec.seed, &format!("session.{cell}.{rep}")))
        .with_tracing(spec.tracing);
    cfg.emulator_path = spec.emulator_path.clone();
    cfg
}

fn analyze(r: &mut RunResult, spec: &ExperimentSpec, dir: &Path, pilot: &str) -> Result<(), String> {
    let trace = analytics::load_session_traces(dir).map_err(|e| e.to_string())?;
    let u = analytics::compute_utilization(&trace, pilot).map_err(|e| e.to_string())?;
    r.ttx_s = u.ttx_s;
    r.ru_pct = u.ru_pct;
    r.ovh_pct = u.ovh_pct;
    r.generations = u.generations;
    r.residual_us = u.residual_us();
    r.replay_clean = analytics::replay_placements(&trace).is_clean();
    if spec.kind == ExperimentKind::Raptor {
        let (conc, rate) = analytics::concurrency_and_rate_series(&trace, SeriesSource::Calls, spec.bin_width_s);
        r.call_concurrency = conc.max();
        let active: Vec<f64> = rate.values.iter().map(|v| v.1).filter(|&v| v > 0.0).collect();
        r.call_rate = if active.is_empty() {
            0.0
        } else {
            active.iter().sum::<f64>() / active.len() as f64
        };
    }
    if spec.plots {
        let source = if spec.kind == ExperimentKind::Raptor {
            SeriesSource::Calls
        } else {
            SeriesSource::Tasks
        };
        let (conc, rate) = analytics::concurrency_and_rate_series(&trace, source, spec.bin_width_s);
        let stacked = analytics::utilization_timeline(&trace, pilot, spec.bin_width_s).map_err(|e| e.to_string())?;
        let stacked = [(pilot.to_string(), stacked)];
        let out = dir.join("report");
        for f in [PlotFormat::Csv, PlotFormat::Svg] {
            analytics::emit_report(&out, std::slice::from_ref(&u), &stacked, &conc, &rate, f)
                .map_err(|e| e.to_string())?;
        }
    }
    Ok(())
}

fn run_tasks_cell(spec: &ExperimentSpec, root: &Path, cell: usize, rep: u32) -> RunResult {
    let mut r = RunResult::new(cell, rep);
    let t0 = Instant::now();
    let outcome = (|| -> Result<(), String> {
        let session = Session::create(root, session_config(spec, cell, rep)).map_err(|e| e.to_string())?;
        r.session_dir = session.dir().to_path_buf();
        let pd = spec.pilot(cell, rep);
        let pilot = PilotManager::new(&session).submit_pilot(pd.clone()).map_err(|e| e.to_string())?;
        let tm = TaskManager::new(&session);
        tm.add_pilot(&pilot);
        let tds = spec.tasks(cell, rep);
        r.tasks = tds.len() as u64;
        let handles: Vec<_> = tm
            .submit_tasks(tds)
            .into_iter()
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        let wait = tm.wait_tasks(&handles, spec.timeout_s.map(Duration::from_secs_f64));
        session.close();
        let infos = match wait {
            Ok(i) => i,
            Err(e) => return Err(e.to_string()),
        };
        r.done = infos.iter().filter(|i| i.state == TaskState::Done).count() as u64;
        r.failed = infos.len() as u64 - r.done;
        analyze(&mut r, spec, session.dir(), &pd.uid)
    })();
    r.wall_s = t0.elapsed().as_secs_f64();
    r.error = outcome.err();
    r
}

fn run_raptor_cell(spec: &ExperimentSpec, root: &Path, cell: usize, rep: u32) -> RunResult {
    let rs = spec.raptor.clone().expect("validated");
    let mut r = RunResult::new(cell, rep);
    let t0 = Instant::now();
    let outcome = (|| -> Result<(), String> {
        let session = Session::create(root, session_config(spec, cell, rep)).map_err(|e| e.to_string())?;
        r.session_dir = session.dir().to_path_buf();
        let pd = spec.pilot(cell, rep);
        let pilot = PilotManager::new(&session).submit_pilot(pd.clone()).map_err(|e| e.to_string())?;
        let tm = TaskManager::new(&session);
        tm.add_pilot(&pilot);
        let mcfg = MasterConfig::new(rs.workers_per_master, rs.cores_per_worker);
        let mut masters = Vec::new();
        for m in 0..rs.masters {
            masters.push(raptor::launch_master(&tm, &format!("master.{m:02}"), mcfg.clone()).map_err(|e| e.to_string())?);
        }
        r.tasks = rs.calls;
        // spread calls round-robin over masters
        let mut per: Vec<Vec<FunctionCall>> = vec![Vec::new(); masters.len()];
        for i in 0..rs.calls {
            per[i as usize % masters.len()].push(FunctionCall::new(
                format!("call.{i:07}"),
                rs.function.clone(),
                rs.payload.clone(),
            ));
        }
        for (m, calls) in masters.iter().zip(per) {
            m.submit(calls).map_err(|e| e.to_string())?;
        }
        let deadline = spec.timeout_s.map(|t| Instant::now() + Duration::from_secs_f64(t));
        let mut seen = std::collections::HashSet::new();
        let mut failed = 0u64;
        while (seen.len() as u64) < rs.calls {
            if deadline.is_some_and(|d| Instant::now() >= d) {
                break;
            }
            for m in &mut masters {
                for res in m.collect(4096, Duration::from_millis(5)).map_err(|e| e.to_string())? {
                    if seen.insert(res.call_uid.clone()) && !res.is_ok() {
                        failed += 1;
                    }
                }
            }
        }
        for m in &masters {
            let _ = m.stop();
        }
        let handles: Vec<_> = masters.iter().map(|m| m.task().clone()).collect();
        let _ = tm.wait_tasks(&handles, Some(Duration::from_secs(30)));
        session.close();
        r.calls_ok = seen.len() as u64 - failed;
        r.done = r.calls_ok;
        r.failed = rs.calls - r.calls_ok;
        analyze(&mut r, spec, session.dir(), &pd.uid)?;
        if (seen.len() as u64) < rs.calls {
            return Err(format!("{} of {} calls returned", seen.len(), rs.calls));
        }
        Ok(())
    })();
    r.wall_s = t0.elapsed().as_secs_f64();
    r.error = outcome.err();
    r
}

/// Runs one cell and repetition, writing its session under `root`.
pub fn run_cell(spec: &ExperimentSpec, root: &Path, cell: usize, rep: u32) -> RunResult {
    if spec.kind == ExperimentKind::Raptor {
        run_raptor_cell(spec, root, cell, rep)
    } else {
        run_tasks_cell(spec, root, cell, rep)
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Header note carried by every summary.
pub const SCALE_NOTE: &str = "# desk scale: task durations and latencies are 1e-3 of the reference runs; \
simulated pilots keep their full node counts on a virtual clock; local runs stay at or below 64 processes";

/// The summary table: one row per cell with mean and standard deviation
/// over repetitions. Only values derived from the traces enter it, so the
/// same spec and seed on the simulated fabric give identical bytes.
pub fn summary_csv(spec: &ExperimentSpec, runs: &[RunResult]) -> String {
    let mut out = String::new();
    out.push_str(SCALE_NOTE);
    out.push('\n');
    let _ = writeln!(out, "# experiment {} ({}), seed {}", spec.name, spec.kind.as_str(), spec.seed);
    out.push_str(
        "cell,tasks,generations,task_runtime_s,cores_per_task,gpus_per_task,cores_per_pilot,gpus_per_pilot,runs,\
ttx_mean_s,ttx_std_s,ovh_mean_pct,ovh_std_pct,ru_mean_pct,ru_std_pct,done,failed,complete\n",
    );
    for cell in 0..spec.nodes.len() {
        let cell_runs: Vec<&RunResult> = runs.iter().filter(|r| r.cell == cell).collect();
        let ok: Vec<&&RunResult> = cell_runs.iter().filter(|r| r.ok()).collect();
        let col = |f: fn(&RunResult) -> f64| mean_std(&ok.iter().map(|r| f(r)).collect::<Vec<_>>());
        let (ttx, ttx_s) = col(|r| r.ttx_s);
        let (ovh, ovh_s) = col(|r| r.ovh_pct);
        let (ru, ru_s) = col(|r| r.ru_pct);
        let generations = ok.iter().map(|r| r.generations).max().unwrap_or(0);
        let tasks = if spec.kind == ExperimentKind::Raptor {
            spec.raptor.as_ref().map_or(0, |r| r.calls)
        } else {
            spec.task_count(cell)
        };
        let done: u64 = cell_runs.iter().map(|r| r.done).sum();
        let failed: u64 = cell_runs.iter().map(|r| r.failed).sum();
        let complete = if ok.len() == cell_runs.len() && !cell_runs.is_empty() {
            "yes".to_string()
        } else {
            format!("incomplete ({} of {})", ok.len(), cell_runs.len())
        };
        let _ = writeln!(
            out,
            "{cell},{tasks},{generations},{},{},{},{},{},{},{ttx:.6},{ttx_s:.6},{ovh:.4},{ovh_s:.4},{ru:.4},{ru_s:.4},{done},{failed},{complete}",
            spec.duration.label(),
            spec.cores_per_task.label(),
            spec.gpus_per_task.label(),
            spec.pilot_cores(cell),
            u64::from(spec.nodes[cell]) * u64::from(spec.gpus_per_node),
            cell_runs.len(),
        );
    }
    out
}

/// Runs every cell `repetitions` times under `out/sessions`, then writes
/// `out/summary.csv`. Failed runs are reported in their cell.
pub fn run_experiment(spec: &ExperimentSpec, out: &Path) -> Result<ExperimentReport, ExperimentError> {
    spec.validate()?;
    let sessions = out.join("sessions");
    std::fs::create_dir_all(&sessions).map_err(|e| ExperimentError::Write {
        path: sessions.clone(),
        reason: e.to_string(),
    })?;
    let mut runs = Vec::new();
    for cell in 0..spec.nodes.len() {
        for rep in 0..spec.repetitions {
            let r = run_cell(spec, &sessions, cell, rep);
            match &r.error {
                Some(e) => log::warn!("{} cell {cell} rep {rep}: {e}", spec.name),
                None => log::info!(
                    "{} cell {cell} rep {rep}: ttx {:.3}s ru {:.1}% ovh {:.1}% in {:.1}s",
                    spec.name,
                    r.ttx_s,
                    r.ru_pct,
                    r.ovh_pct,
                    r.wall_s
                ),
            }
            runs.push(r);
        }
    }
    let summary = out.join("summary.csv");
    std::fs::write(&summary, summary_csv(spec, &runs)).map_err(|e| ExperimentError::Write {
        path: summary.clone(),
        reason: e.to_string(),
    })?;
    Ok(ExperimentReport {
        spec: spec.clone(),
        runs,
        summary,
    })
}
