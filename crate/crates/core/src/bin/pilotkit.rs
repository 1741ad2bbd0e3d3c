use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};

use pilotkit::analytics::{self, PlotFormat, SeriesSource};
use pilotkit::client::{PilotManager, Session, TaskManager};
use pilotkit::config::Workload;
use pilotkit::harness::{run_experiment, ExperimentSpec};
use pilotkit::task::TaskState;

#[derive(Parser)]
#[command(name = "pilotkit", version, about = "Run, analyze and benchmark task workloads on pilots")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Plot,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a workload file and leave its session directory under --out.
    Run {
        /// Workload file: session settings, pilot(s) and tasks.
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "sessions")]
        out: PathBuf,
    },
    /// Compute utilization, TTX and series from a closed session.
    Analyze {
        session: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        bin_width: f64,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        /// Defaults to `<session>/report`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every cell of an experiment spec and write summary.csv.
    Experiment {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(workload: PathBuf, out: PathBuf) -> anyhow::Result<bool> {
    let w = Workload::from_file(&workload)?;
    let session = Session::create(&out, w.session.clone())?;
    println!("session {}", session.dir().display());
    let pilots = PilotManager::new(&session).submit_pilots(w.all_pilots())?;
    let tm = TaskManager::new(&session);
    for p in &pilots {
        tm.add_pilot(p);
    }
    let mut handles = Vec::new();
    let mut ok = true;
    for r in tm.submit_tasks(w.tasks.clone()) {
        match r {
            Ok(h) => handles.push(h),
            Err(e) => {
                eprintln!("rejected: {e}");
                ok = false;
            }
        }
    }
    let infos = match tm.wait_tasks(&handles, w.timeout_s.map(Duration::from_secs_f64)) {
        Ok(i) => i,
        Err(e) => {
            eprintln!("{e}");
            ok = false;
            handles.iter().map(|h| h.info()).collect()
        }
    };
    session.close();
    let mut counts = std::collections::BTreeMap::new();
    for i in &infos {
        *counts.entry(i.state.as_str()).or_insert(0u64) += 1;
        if i.state != TaskState::Done {
            ok = false;
        }
    }
    for (s, n) in counts {
        println!("{s} {n}");
    }
    Ok(ok)
}

fn analyze(session: PathBuf, bin_width: f64, format: Format, out: Option<PathBuf>) -> anyhow::Result<bool> {
    let trace = analytics::load_session_traces(&session)?;
    if !trace.corrupt.is_empty() {
        eprintln!("{} corrupt line(s) skipped", trace.corrupt.len());
    }
    let mut reports = Vec::new();
    let mut stacked = Vec::new();
    for pd in &trace.manifest.pilots {
        let u = analytics::compute_utilization(&trace, &pd.uid).with_context(|| format!("pilot {}", pd.uid))?;
        println!(
            "{}: tasks {} cores {} ttx {:.6}s ru {:.2}% ovh {:.2}%",
            pd.uid, u.tasks, u.cores, u.ttx_s, u.ru_pct, u.ovh_pct
        );
        stacked.push((pd.uid.clone(), analytics::utilization_timeline(&trace, &pd.uid, bin_width)?));
        reports.push(u);
    }
    let calls = trace.events.iter().any(|e| e.event_name == "call_stop");
    let source = if calls { SeriesSource::Calls } else { SeriesSource::Tasks };
    let (conc, rate) = analytics::concurrency_and_rate_series(&trace, source, bin_width);
    let replay = analytics::replay_placements(&trace);
    for v in replay.overlaps.iter().chain(&replay.spanning) {
        eprintln!("violation: {v}");
    }
    let out = out.unwrap_or_else(|| session.join("report"));
    let format = match format {
        Format::Csv => PlotFormat::Csv,
        Format::Plot => PlotFormat::Svg,
    };
    let files = analytics::emit_report(&out, &reports, &stacked, &conc, &rate, format)?;
    for f in files.files {
        println!("wrote {}", f.display());
    }
    Ok(replay.is_clean())
}

fn experiment(spec: PathBuf, out: PathBuf) -> anyhow::Result<bool> {
    let spec = ExperimentSpec::from_file(&spec)?;
    let report = run_experiment(&spec, &out)?;
    print!("{}", std::fs::read_to_string(&report.summary)?);
    Ok(report.runs.iter().all(|r| r.ok()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Run { config, out } => run(config, out),
        Cmd::Analyze {
            session,
            bin_width,
            format,
            out,
        } => analyze(session, bin_width, format, out),
        Cmd::Experiment { spec, out } => experiment(spec, out),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
