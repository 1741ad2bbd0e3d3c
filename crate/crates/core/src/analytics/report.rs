use std::path::{Path, PathBuf};

use plotters::prelude::*;

use super::metrics::{Category, StackedSeries, TimeSeries, UtilizationReport, CATEGORIES};
use super::AnalyticsError;
use crate::time::Micros;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotFormat {
    Csv,
    Svg,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportFiles {
    pub files: Vec<PathBuf>,
}

fn unwritable(path: &Path, e: impl std::fmt::Display) -> AnalyticsError {
    AnalyticsError::UnwritableOutput {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

fn write_csv(path: &Path, header: &[String], rows: Vec<Vec<String>>) -> Result<(), AnalyticsError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| unwritable(path, e))?;
    w.write_record(header).map_err(|e| unwritable(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| unwritable(path, e))?;
    }
    w.flush().map_err(|e| unwritable(path, e))
}

fn core_s(us: i64) -> String {
    Micros(us).to_string()
}

fn bin_start(origin_s: f64, width_s: f64, i: usize) -> String {
    Micros::from_secs_f64(origin_s + width_s * i as f64).to_string()
}

/// Writes the utilization table, per-pilot stacked utilization and the
/// concurrency/rate series into `out`, as CSV tables or SVG plots.
pub fn emit_report(
    out: &Path,
    reports: &[UtilizationReport],
    stacked: &[(String, StackedSeries)],
    concurrency: &TimeSeries,
    rate: &TimeSeries,
    format: PlotFormat,
) -> Result<ReportFiles, AnalyticsError> {
    std::fs::create_dir_all(out).map_err(|e| unwritable(out, e))?;
    let mut files = ReportFiles::default();
    match format {
        PlotFormat::Csv => {
            let path = out.join("utilization.csv");
            let mut header: Vec<String> = ["pilot", "tasks", "generations", "cores", "ttx_s", "ovh_pct", "ru_pct", "total_core_s"]
                .map(String::from)
                .to_vec();
            header.extend(CATEGORIES.iter().map(|c| c.as_str().to_string()));
            let rows = reports
                .iter()
                .map(|r| {
                    let mut row = vec![
                        r.pilot.clone(),
                        r.tasks.to_string(),
                        r.generations.to_string(),
                        r.cores.to_string(),
                        format!("{:.6}", r.ttx_s),
                        format!("{:.4}", r.ovh_pct),
                        format!("{:.4}", r.ru_pct),
                        core_s(r.total_core_us),
                    ];
                    row.extend(CATEGORIES.iter().map(|c| core_s(r.breakdown_us.get(c).copied().unwrap_or(0))));
                    row
                })
                .collect();
            write_csv(&path, &header, rows)?;
            files.files.push(path);
            for (pilot, s) in stacked {
                let path = out.join(format!("stacked_{pilot}.csv"));
                let mut header = vec!["t_s".to_string()];
                header.extend(CATEGORIES.iter().map(|c| c.as_str().to_string()));
                let rows = (0..s.bins())
                    .map(|i| {
                        let mut row = vec![bin_start(s.origin_s, s.bin_width_s, i)];
                        row.extend(CATEGORIES.iter().map(|c| core_s(s.values[c].get(i).copied().unwrap_or(0))));
                        row
                    })
                    .collect();
                write_csv(&path, &header, rows)?;
                files.files.push(path);
            }
            let path = out.join("series.csv");
            let header = ["t_s", "concurrency", "rate_per_s"].map(String::from).to_vec();
            let rows = concurrency
                .values
                .iter()
                .zip(&rate.values)
                .map(|(c, r)| vec![format!("{:.6}", c.0), format!("{:.6}", c.1), format!("{:.6}", r.1)])
                .collect();
            write_csv(&path, &header, rows)?;
            files.files.push(path);
        }
        PlotFormat::Svg => {
            for (pilot, s) in stacked {
                let path = out.join(format!("stacked_{pilot}.svg"));
                plot_stacked(&path, pilot, s).map_err(|e| unwritable(&path, e))?;
                files.files.push(path);
            }
            let path = out.join("series.svg");
            plot_series(&path, concurrency, rate).map_err(|e| unwritable(&path, e))?;
            files.files.push(path);
        }
    }
    Ok(files)
}

fn color(c: Category) -> RGBColor {
    match c {
        Category::PilotStartup => RGBColor(31, 119, 180),
        Category::Warmup => RGBColor(255, 127, 14),
        Category::PrepareExec => RGBColor(148, 103, 189),
        Category::ExecCmd => RGBColor(20, 20, 20),
        Category::Idle => RGBColor(44, 160, 44),
        Category::Drain => RGBColor(214, 39, 40),
    }
}

type PlotResult = Result<(), Box<dyn std::error::Error>>;

fn plot_stacked(path: &Path, pilot: &str, s: &StackedSeries) -> PlotResult {
    let root = SVGBackend::new(path, (960, 480)).into_drawing_area();
    root.fill(&WHITE)?;
    let bins = s.bins();
    let width_us = (s.bin_width_s * 1e6).max(1.0);
    let cores = |v: i64| v as f64 / width_us;
    let mut cum = vec![0.0; bins];
    let mut layers = Vec::new();
    for c in CATEGORIES {
        for (i, acc) in cum.iter_mut().enumerate() {
            *acc += cores(s.values[&c].get(i).copied().unwrap_or(0));
        }
        layers.push((c, cum.clone()));
    }
    let ymax = cum.iter().copied().fold(1.0, f64::max);
    let xmax = (s.origin_s + s.bin_width_s * bins.max(1) as f64).max(s.origin_s + 1e-6);
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("core utilization, {pilot}"), ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(50)
        .build_cartesian_2d(s.origin_s..xmax, 0.0..ymax * 1.05)?;
    chart.configure_mesh().x_desc("time (s)").y_desc("cores").draw()?;
    for (c, top) in layers.iter().rev() {
        let pts = top
            .iter()
            .enumerate()
            .map(|(i, &v)| (s.origin_s + s.bin_width_s * i as f64, v));
        chart
            .draw_series(AreaSeries::new(pts, 0.0, color(*c).mix(0.9)))?
            .label(c.as_str())
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 10, y + 5)], color(*c).filled()));
    }
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).draw()?;
    root.present()?;
    Ok(())
}

fn plot_series(path: &Path, conc: &TimeSeries, rate: &TimeSeries) -> PlotResult {
    let root = SVGBackend::new(path, (960, 640)).into_drawing_area();
    root.fill(&WHITE)?;
    let (top, bottom) = root.split_vertically(320);
    for (area, s, label) in [(top, conc, "concurrency"), (bottom, rate, "rate (1/s)")] {
        let x0 = s.values.first().map_or(0.0, |v| v.0);
        let x1 = s.values.last().map_or(1.0, |v| v.0 + s.bin_width_s).max(x0 + 1e-6);
        let mut chart = ChartBuilder::on(&area)
            .margin(10)
            .x_label_area_size(30)
            .y_label_area_size(60)
            .build_cartesian_2d(x0..x1, 0.0..s.max().max(1.0) * 1.05)?;
        chart.configure_mesh().x_desc("time (s)").y_desc(label).draw()?;
        chart.draw_series(LineSeries::new(s.values.iter().copied(), &BLUE))?;
    }
    root.present()?;
    Ok(())
}
