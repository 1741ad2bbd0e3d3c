use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::timeline::{task_timelines, Attempt, TaskTimeline};
use super::{AnalyticsError, Trace};
use crate::pilot::PilotDescription;
use crate::time::Micros;
use crate::tracer::names;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    PilotStartup,
    Warmup,
    PrepareExec,
    ExecCmd,
    Idle,
    Drain,
}

pub const CATEGORIES: [Category; 6] = [
    Category::PilotStartup,
    Category::Warmup,
    Category::PrepareExec,
    Category::ExecCmd,
    Category::Idle,
    Category::Drain,
];

impl Category {
    pub fn as_str(self) -> &'static str {
        match self {
            Category::PilotStartup => "pilot_startup",
            Category::Warmup => "warmup",
            Category::PrepareExec => "prepare_exec",
            Category::ExecCmd => "exec_cmd",
            Category::Idle => "idle",
            Category::Drain => "drain",
        }
    }

    pub fn is_overhead(self) -> bool {
        !matches!(self, Category::ExecCmd | Category::Idle)
    }
}

/// Core-time of one pilot split into the six categories. All `_us` values
/// are core-microseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilizationReport {
    pub pilot: String,
    pub cores: u64,
    pub tasks: u64,
    /// Most task executions any single core saw.
    pub generations: u64,
    pub ttx_s: f64,
    pub pilot_start: Micros,
    pub agent_stop: Micros,
    pub total_core_us: i64,
    pub breakdown_us: BTreeMap<Category, i64>,
    pub ru_pct: f64,
    pub ovh_pct: f64,
}

impl UtilizationReport {
    pub fn total_core_s(&self) -> f64 {
        self.total_core_us as f64 / 1e6
    }

    pub fn core_s(&self, c: Category) -> f64 {
        self.breakdown_us.get(&c).copied().unwrap_or(0) as f64 / 1e6
    }

    /// Breakdown total minus `cores × span`. Zero for every well-formed
    /// trace.
    pub fn residual_us(&self) -> i64 {
        self.breakdown_us.values().sum::<i64>() - self.total_core_us
    }
}

/// First pull to last spawn return over `events`.
fn ttx_of<'a>(events: impl Iterator<Item = &'a crate::tracer::Event>) -> Option<Micros> {
    let mut first = None::<Micros>;
    let mut last = None::<Micros>;
    for e in events {
        match e.event_name.as_str() {
            names::DB_BRIDGE_PULL => first = Some(first.map_or(e.timestamp, |f| f.min(e.timestamp))),
            names::SPAWN_RETURN => last = Some(last.map_or(e.timestamp, |l| l.max(e.timestamp))),
            _ => {}
        }
    }
    Some(last? - first?)
}

/// Time from the first task pull to the last spawn return, over all pilots
/// or just `pilot`.
pub fn compute_ttx(trace: &Trace, pilot: Option<&str>) -> Result<f64, AnalyticsError> {
    let t = match pilot {
        Some(p) => ttx_of(trace.for_pilot(p)),
        None => ttx_of(trace.events.iter()),
    };
    t.map(Micros::as_secs_f64).ok_or(AnalyticsError::NoTasks)
}

struct Bounds {
    start: Micros,
    ready: Micros,
    stop: Micros,
    drain_from: Micros,
}

fn bounds(trace: &Trace, pilot: &str, tls: &BTreeMap<String, TaskTimeline>) -> Result<Bounds, AnalyticsError> {
    let agent = format!("{pilot}.agent");
    let find = |name: &str| {
        trace
            .events
            .iter()
            .find(|e| e.component == agent && e.event_name == name)
            .map(|e| e.timestamp)
    };
    let (start, ready, stop) = (find(names::PILOT_START), find(names::AGENT_READY), find(names::AGENT_STOP));
    let mut missing = Vec::new();
    for (v, n) in [(start, names::PILOT_START), (ready, names::AGENT_READY), (stop, names::AGENT_STOP)] {
        if v.is_none() {
            missing.push(format!("{pilot}: no {n}"));
        }
    }
    for tl in tls.values() {
        if tl.attempts.iter().any(|a| a.end().is_none()) {
            missing.push(format!("{}: placement never released", tl.uid));
        }
    }
    if !missing.is_empty() {
        return Err(AnalyticsError::IncompleteTrace(missing));
    }
    let (start, stop) = (start.unwrap(), stop.unwrap());
    let ready = ready.unwrap().max(start).min(stop);
    let last_return = tls
        .values()
        .flat_map(|t| t.attempts.iter().filter_map(|a| a.spawn_return))
        .max()
        .unwrap_or(ready);
    Ok(Bounds {
        start,
        ready,
        stop,
        drain_from: last_return.max(ready).min(stop),
    })
}

/// Walks every core of the pilot from pilot start to agent stop and hands
/// each contiguous `[a, b)` piece with its category to `f`.
fn walk_slots(
    pd: &PilotDescription,
    tls: &BTreeMap<String, TaskTimeline>,
    b: &Bounds,
    mut f: impl FnMut(Category, Micros, Micros),
) -> u64 {
    let cpn = pd.cores_per_node as usize;
    let n = pd.nodes as usize * cpn;
    let mut per_slot: Vec<Vec<&Attempt>> = vec![Vec::new(); n];
    for tl in tls.values() {
        for a in &tl.attempts {
            let Some(p) = &a.placement else { continue };
            for na in &p.assignments {
                for &c in &na.core_indices {
                    let i = na.node_index * cpn + c as usize;
                    if let Some(s) = per_slot.get_mut(i) {
                        s.push(a);
                    }
                }
            }
        }
    }
    let mut generations = 0u64;
    for attempts in &mut per_slot {
        attempts.sort_by_key(|a| a.scheduled);
        let clamp = |t: Micros, lo: Micros| t.max(lo).min(b.stop);
        let mut emit = |c: Category, x: Micros, y: Micros| {
            if y > x {
                f(c, x, y);
            }
        };
        // idle-like gaps turn into drain once the agent is tearing down
        let gap = |c: Category, x: Micros, y: Micros, emit: &mut dyn FnMut(Category, Micros, Micros)| {
            let cut = b.drain_from.max(x).min(y);
            emit(c, x, cut);
            emit(Category::Drain, cut, y);
        };
        emit(Category::PilotStartup, b.start, b.ready);
        let mut cursor = b.ready;
        let mut used = false;
        let mut runs = 0u64;
        for a in attempts.iter() {
            let end = clamp(a.end().unwrap_or(b.stop), cursor);
            let p = clamp(a.prepare_start.unwrap_or(end), cursor).min(end);
            let es = clamp(a.exec_start.or(a.exec_stop).unwrap_or(end), p).min(end);
            let ee = clamp(a.exec_stop.unwrap_or(end), es).min(end);
            gap(if used { Category::Idle } else { Category::Warmup }, cursor, p, &mut emit);
            if a.prepare_start.is_none() {
                // held but never launched
                gap(Category::Idle, p, end, &mut emit);
            } else {
                emit(Category::PrepareExec, p, es);
                emit(Category::ExecCmd, es, ee);
                emit(Category::Drain, ee, end);
                used = true;
            }
            if a.exec_start.is_some() {
                runs += 1;
            }
            cursor = end;
        }
        gap(Category::Idle, cursor, b.stop, &mut emit);
        generations = generations.max(runs);
    }
    generations
}

fn pilot_desc<'a>(trace: &'a Trace, pilot: &str) -> Result<&'a PilotDescription, AnalyticsError> {
    trace.pilot(pilot).ok_or_else(|| AnalyticsError::UnknownPilot(pilot.to_string()))
}

/// Core-time breakdown of one pilot. Resources are the pilot's cores; GPUs
/// do not enter the denominator.
pub fn compute_utilization(trace: &Trace, pilot: &str) -> Result<UtilizationReport, AnalyticsError> {
    let pd = pilot_desc(trace, pilot)?;
    let tls = task_timelines(trace, pilot);
    let b = bounds(trace, pilot, &tls)?;
    let mut breakdown: BTreeMap<Category, i64> = CATEGORIES.iter().map(|&c| (c, 0)).collect();
    let generations = walk_slots(pd, &tls, &b, |c, x, y| *breakdown.get_mut(&c).expect("all present") += (y - x).0);
    let cores = pd.total_cores();
    let total = cores as i64 * (b.stop - b.start).0;
    let pct = |v: i64| if total > 0 { 100.0 * v as f64 / total as f64 } else { 0.0 };
    let ovh: i64 = breakdown.iter().filter(|(c, _)| c.is_overhead()).map(|(_, v)| v).sum();
    Ok(UtilizationReport {
        pilot: pilot.to_string(),
        cores,
        tasks: tls.values().filter(|t| t.pulled.is_some()).count() as u64,
        generations,
        ttx_s: ttx_of(trace.for_pilot(pilot)).map_or(0.0, Micros::as_secs_f64),
        pilot_start: b.start,
        agent_stop: b.stop,
        total_core_us: total,
        ru_pct: pct(breakdown[&Category::ExecCmd]),
        ovh_pct: pct(ovh),
        breakdown_us: breakdown,
    })
}

/// Sums `[a, b)` intervals into fixed-width bins starting at `origin`.
struct BinAcc {
    origin: i64,
    width: i64,
    partial: Vec<i64>,
    full: Vec<i64>,
}

impl BinAcc {
    fn new(origin: Micros, width: Micros) -> Self {
        BinAcc {
            origin: origin.0,
            width: width.0.max(1),
            partial: Vec::new(),
            full: Vec::new(),
        }
    }

    fn grow(&mut self, n: usize) {
        if self.partial.len() < n {
            self.partial.resize(n, 0);
            self.full.resize(n + 1, 0);
        }
    }

    fn add(&mut self, a: Micros, b: Micros) {
        let (a, b) = (a.0 - self.origin, b.0 - self.origin);
        if b <= a || a < 0 {
            return;
        }
        let (w, ia, ib) = (self.width, (a / self.width) as usize, ((b - 1) / self.width) as usize);
        self.grow(ib + 1);
        if ia == ib {
            self.partial[ia] += b - a;
            return;
        }
        self.partial[ia] += (ia as i64 + 1) * w - a;
        self.partial[ib] += b - ib as i64 * w;
        if ib > ia + 1 {
            self.full[ia + 1] += 1;
            self.full[ib] -= 1;
        }
    }

    fn point(&mut self, t: Micros) {
        let t = t.0 - self.origin;
        if t < 0 {
            return;
        }
        let i = (t / self.width) as usize;
        self.grow(i + 1);
        self.partial[i] += 1;
    }

    fn finish(mut self, bins: usize) -> Vec<i64> {
        self.grow(bins);
        let mut run = 0;
        (0..self.partial.len())
            .map(|i| {
                run += self.full[i];
                self.partial[i] + run * self.width
            })
            .collect()
    }
}

/// Core occupancy per category over time: `values[c][i]` is core-µs of
/// category `c` in bin `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedSeries {
    pub bin_width_s: f64,
    pub origin_s: f64,
    pub values: BTreeMap<Category, Vec<i64>>,
}

impl StackedSeries {
    pub fn bins(&self) -> usize {
        self.values.values().map(Vec::len).max().unwrap_or(0)
    }
}

pub fn utilization_timeline(trace: &Trace, pilot: &str, bin_width_s: f64) -> Result<StackedSeries, AnalyticsError> {
    let pd = pilot_desc(trace, pilot)?;
    let tls = task_timelines(trace, pilot);
    let b = bounds(trace, pilot, &tls)?;
    let width = Micros::from_secs_f64(bin_width_s).max(Micros(1));
    let mut accs: BTreeMap<Category, BinAcc> = CATEGORIES.iter().map(|&c| (c, BinAcc::new(b.start, width))).collect();
    walk_slots(pd, &tls, &b, |c, x, y| accs.get_mut(&c).expect("all present").add(x, y));
    let span = (b.stop - b.start).0;
    let bins = if span > 0 { ((span - 1) / width.0 + 1) as usize } else { 0 };
    Ok(StackedSeries {
        bin_width_s: width.as_secs_f64(),
        origin_s: b.start.as_secs_f64(),
        values: accs.into_iter().map(|(c, a)| (c, a.finish(bins))).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub bin_width_s: f64,
    /// `(bin start in seconds, value)`, contiguous bins.
    pub values: Vec<(f64, f64)>,
}

impl TimeSeries {
    /// Σ value × bin width.
    pub fn integral(&self) -> f64 {
        self.values.iter().map(|(_, v)| v * self.bin_width_s).sum()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().map(|v| v.1).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeriesSource {
    /// exec_start/exec_stop of tasks; rate counts spawn returns.
    Tasks,
    /// call_start/call_stop of master/worker calls; rate counts call stops.
    Calls,
}

/// Mean execution concurrency per bin and completions per second per bin.
pub fn concurrency_and_rate_series(trace: &Trace, source: SeriesSource, bin_width_s: f64) -> (TimeSeries, TimeSeries) {
    let width = Micros::from_secs_f64(bin_width_s).max(Micros(1));
    let mut intervals: Vec<(Micros, Micros)> = Vec::new();
    let mut points: Vec<Micros> = Vec::new();
    match source {
        SeriesSource::Tasks => {
            let mut pilots: Vec<&str> = trace.manifest.pilots.iter().map(|p| p.uid.as_str()).collect();
            pilots.sort();
            for p in pilots {
                for tl in task_timelines(trace, p).values() {
                    for a in &tl.attempts {
                        if let (Some(s), Some(e)) = (a.exec_start, a.exec_stop) {
                            intervals.push((s, e));
                        }
                        points.extend(a.spawn_return);
                    }
                }
            }
        }
        SeriesSource::Calls => {
            let mut open: HashMap<(&str, &str), Micros> = HashMap::new();
            for e in &trace.events {
                let Some(uid) = e.task_uid.as_deref() else { continue };
                match e.event_name.as_str() {
                    names::CALL_START => {
                        open.insert((&e.component, uid), e.timestamp);
                    }
                    names::CALL_STOP => {
                        if let Some(s) = open.remove(&(e.component.as_str(), uid)) {
                            intervals.push((s, e.timestamp));
                        }
                        points.push(e.timestamp);
                    }
                    _ => {}
                }
            }
        }
    }
    let origin = intervals
        .iter()
        .map(|i| i.0)
        .chain(points.iter().copied())
        .min()
        .unwrap_or(Micros::ZERO);
    let origin = Micros(origin.0.div_euclid(width.0) * width.0);
    let mut busy = BinAcc::new(origin, width);
    for (s, e) in &intervals {
        busy.add(*s, *e);
    }
    let mut done = BinAcc::new(origin, width);
    for p in &points {
        done.point(*p);
    }
    let busy = busy.finish(0);
    let done = done.finish(busy.len());
    let busy_len = busy.len();
    let busy = {
        let mut b = busy;
        b.resize(done.len().max(busy_len), 0);
        b
    };
    let w = width.as_secs_f64();
    let t = |i: usize| (Micros(origin.0 + i as i64 * width.0)).as_secs_f64();
    let conc = busy.iter().enumerate().map(|(i, &v)| (t(i), v as f64 / width.0 as f64)).collect();
    let rate = done.iter().enumerate().map(|(i, &v)| (t(i), v as f64 / w)).collect();
    (
        TimeSeries {
            bin_width_s: w,
            values: conc,
        },
        TimeSeries {
            bin_width_s: w,
            values: rate,
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub n: u64,
    pub mean_s: f64,
    pub std_s: f64,
}

impl LatencyStats {
    fn of(samples: &[i64]) -> Self {
        let n = samples.len() as u64;
        if n == 0 {
            return LatencyStats {
                n,
                mean_s: 0.0,
                std_s: 0.0,
            };
        }
        let mean = samples.iter().sum::<i64>() as f64 / n as f64;
        let var = if n > 1 {
            samples.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        LatencyStats {
            n,
            mean_s: mean / 1e6,
            std_s: var.sqrt() / 1e6,
        }
    }
}

/// Launch preparation (prepare_start to exec_start) and completion
/// acknowledgement (exec_stop to spawn_return) over every attempt of
/// `pilot`.
pub fn latency_stats(trace: &Trace, pilot: &str) -> (LatencyStats, LatencyStats) {
    let mut prep = Vec::new();
    let mut ack = Vec::new();
    for tl in task_timelines(trace, pilot).values() {
        for a in &tl.attempts {
            if let (Some(p), Some(s)) = (a.prepare_start, a.exec_start) {
                prep.push((s - p).0);
            }
            if let (Some(e), Some(r)) = (a.exec_stop, a.spawn_return) {
                ack.push((r - e).0);
            }
        }
    }
    (LatencyStats::of(&prep), LatencyStats::of(&ack))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bins_sum_to_interval_length() {
        let mut acc = BinAcc::new(Micros(0), Micros(10));
        acc.add(Micros(5), Micros(47));
        acc.add(Micros(0), Micros(10));
        let v = acc.finish(0);
        assert_eq!(v, vec![15, 10, 10, 10, 7]);
        assert_eq!(v.iter().sum::<i64>(), 52);
    }

    #[test]
    fn points_land_in_their_bin() {
        let mut acc = BinAcc::new(Micros(100), Micros(10));
        for t in [100, 109, 110, 135] {
            acc.point(Micros(t));
        }
        assert_eq!(acc.finish(5), vec![2, 1, 0, 1, 0]);
    }
}
