use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::diagnostics::{
    convergence_deviation_dcv, first_divergence_time, first_instability_in, relative_error_cv_of, stability_count_of,
    ConvergenceRecord, DcvGrids, DcvMode, DiagnosticsError, StabilityRecord,
};
use crate::store::{RunManifest, SnapshotSeries};

use super::run::{load_or_run, load_run, run_path, x_line};
use super::{ExperimentPlan, HarnessError};

/// One verdict: first crossing time, no crossing, or a failed run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Cell {
    Time(f64),
    Never,
    Failed(f64),
}

impl Cell {
    fn from_crossing(crossing: Option<f64>, failure: Option<f64>) -> Self {
        match (crossing, failure) {
            (Some(t), _) => Cell::Time(t),
            (None, Some(t)) => Cell::Failed(t),
            (None, None) => Cell::Never,
        }
    }

    /// Sort key placing `Never` after every time.
    pub fn rank(&self) -> f64 {
        match *self {
            Cell::Time(t) | Cell::Failed(t) => t,
            Cell::Never => f64::INFINITY,
        }
    }
}

impl std::fmt::Display for Cell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Cell::Time(t) => write!(f, "{t}"),
            Cell::Never => f.write_str("INF"),
            Cell::Failed(t) => write!(f, "FAIL({t})"),
        }
    }
}

/// Rows are thresholds, columns masses, for one amplitude.
#[derive(Debug, Clone, PartialEq)]
pub struct VerdictTable {
    pub amplitude: f64,
    pub thresholds: Vec<f64>,
    pub masses: Vec<f64>,
    pub cells: Vec<Vec<Cell>>,
}

impl VerdictTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("eps");
        for m in &self.masses {
            write!(out, ",{m}").unwrap();
        }
        out.push('\n');
        for (eps, row) in self.thresholds.iter().zip(&self.cells) {
            write!(out, "{eps}").unwrap();
            for cell in row {
                write!(out, ",{cell}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Per-sample `SN / N` along the x line of a run.
pub fn stability_records(series: &SnapshotSeries) -> Vec<StabilityRecord<f64>> {
    let grid = &series.manifest.grid;
    let n = grid.points()[0];
    series
        .frames
        .iter()
        .map(|f| {
            let line: Vec<f64> = x_line(grid, &f.phi).collect();
            let sn = stability_count_of(&line);
            StabilityRecord { time: f.time, sn_count: sn, grid_points: n, ratio: sn as f64 / n as f64 }
        })
        .collect()
}

fn cv_of(coarse: &[f64], reference: &[f64]) -> Result<f64, DiagnosticsError> {
    match relative_error_cv_of(coarse, reference) {
        // identically zero reference: exact agreement or unbounded relative error
        Err(DiagnosticsError::ZeroReference) => {
            Ok(if coarse.iter().all(|&v| v == 0.0) { f64::NEG_INFINITY } else { f64::INFINITY })
        }
        other => other,
    }
}

/// CV curves for every run against the last (finest) one, at the times all
/// runs share; DCV is attached to the records of `grids.coarse`.
///
/// `runs` must be ordered by ascending x resolution.
pub fn convergence_records(
    runs: &[&SnapshotSeries],
    grids: DcvGrids,
    mode: DcvMode,
) -> Result<Vec<Vec<ConvergenceRecord<f64>>>, HarnessError> {
    grids.validate()?;
    let finest = runs.last().ok_or(DiagnosticsError::EmptySeries)?;
    let points = |s: &SnapshotSeries| s.manifest.grid.points()[0];
    if points(finest) != grids.finest {
        return Err(HarnessError::Unsupported(format!(
            "finest run has {} points, not {}",
            points(finest),
            grids.finest
        )));
    }
    let lines = |s: &SnapshotSeries| -> Vec<Vec<f64>> {
        s.frames.iter().map(|f| x_line(&s.manifest.grid, &f.phi).collect()).collect()
    };
    let reference = lines(finest);
    let mut all = Vec::new();
    for run in &runs[..runs.len() - 1] {
        let coarse = lines(run);
        let mut records = Vec::new();
        for (f, line) in run.frames.iter().zip(&coarse) {
            let Some(fi) = finest.frames.iter().position(|r| r.time == f.time) else { continue };
            records.push(ConvergenceRecord {
                time: f.time,
                grid_id: points(run),
                cv: cv_of(line, &reference[fi])?,
                dcv: None,
            });
        }
        all.push(records);
    }
    let find = |g: usize| runs.iter().position(|s| points(s) == g);
    let (Some(ic), Some(is)) = (find(grids.coarse), find(grids.second)) else {
        return Err(HarnessError::Unsupported("the DCV grids are not among the runs".into()));
    };
    let second = all[is].clone();
    for rec in all[ic].iter_mut() {
        let Some(s) = second.iter().find(|s| s.time == rec.time) else { continue };
        if rec.cv.is_finite() && s.cv.is_finite() {
            rec.dcv = Some(convergence_deviation_dcv(rec.cv, s.cv, grids, mode)?);
        }
    }
    Ok(all)
}

fn earliest_failure<'a>(runs: impl IntoIterator<Item = &'a SnapshotSeries>) -> Option<f64> {
    runs.into_iter().filter_map(|s| s.status.failure_time()).min_by(f64::total_cmp)
}

/// Where the runs of a suite come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunSource {
    /// Reuse stored runs and compute any that are missing.
    RunMissing,
    /// Only read stored runs; a missing file is an error.
    StoredOnly,
}

fn fetch(
    plan: &ExperimentPlan,
    manifests: Vec<RunManifest>,
    source: RunSource,
) -> Result<Vec<SnapshotSeries>, HarnessError> {
    let dir = plan.output.as_path();
    let job = |m: &RunManifest| match source {
        RunSource::RunMissing => load_or_run(dir, m),
        RunSource::StoredOnly => load_run(dir, m)?.ok_or_else(|| HarnessError::MissingRun(run_path(dir, m))),
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(plan.workers).build()?;
    pool.install(|| manifests.par_iter().map(job).collect())
}

/// Stability tables (one per amplitude) from the finest grid, plus the raw series.
pub fn run_stability_sweep(
    plan: &ExperimentPlan,
    source: RunSource,
) -> Result<(Vec<VerdictTable>, Vec<SnapshotSeries>), HarnessError> {
    plan.validate()?;
    let n = plan.finest();
    let mut manifests = Vec::new();
    for &a in &plan.amplitudes {
        for &m in &plan.masses {
            manifests.push(plan.manifest(a, m, n)?);
        }
    }
    let runs = fetch(plan, manifests, source)?;
    let mut tables = Vec::new();
    for (ai, &a) in plan.amplitudes.iter().enumerate() {
        let mut cells = vec![Vec::with_capacity(plan.masses.len()); plan.eps_s.len()];
        for mi in 0..plan.masses.len() {
            let run = &runs[ai * plan.masses.len() + mi];
            let records = stability_records(run);
            for (row, &eps) in cells.iter_mut().zip(&plan.eps_s) {
                let crossing = if records.is_empty() { None } else { first_instability_in(&records, eps)? };
                row.push(Cell::from_crossing(crossing, run.status.failure_time()));
            }
        }
        tables.push(VerdictTable { amplitude: a, thresholds: plan.eps_s.clone(), masses: plan.masses.clone(), cells });
    }
    Ok((tables, runs))
}

/// Convergence curves of one `(A, m)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceSeries {
    pub amplitude: f64,
    pub mass: f64,
    pub grids: Vec<usize>,
    /// One curve per grid except the finest, in ladder order.
    pub records: Vec<Vec<ConvergenceRecord<f64>>>,
    pub failure: Option<f64>,
}

/// Convergence tables (one per amplitude) and the CV/DCV curves behind them.
pub fn run_refinement_suite(
    plan: &ExperimentPlan,
    source: RunSource,
) -> Result<(Vec<VerdictTable>, Vec<ConvergenceSeries>), HarnessError> {
    plan.validate()?;
    let mut manifests = Vec::new();
    for &a in &plan.amplitudes {
        for &m in &plan.masses {
            for &n in &plan.grids {
                manifests.push(plan.manifest(a, m, n)?);
            }
        }
    }
    let runs = fetch(plan, manifests, source)?;
    let (coarse, second, finest) = plan.dcv_triple();
    let grids = DcvGrids { coarse, second, finest };
    let dcv_index = plan.grids.len() - 3;
    let mut tables = Vec::new();
    let mut curves = Vec::new();
    let mut chunks = runs.chunks(plan.grids.len());
    for &a in &plan.amplitudes {
        let mut cells = vec![Vec::with_capacity(plan.masses.len()); plan.eps_c.len()];
        for &m in &plan.masses {
            let ladder: Vec<&SnapshotSeries> = chunks.next().expect("one chunk per pair").iter().collect();
            let records = convergence_records(&ladder, grids, plan.dcv_mode)?;
            let failure = earliest_failure(ladder[dcv_index..].iter().copied());
            for (row, &eps) in cells.iter_mut().zip(&plan.eps_c) {
                let dcv = &records[dcv_index];
                let crossing = if dcv.is_empty() { None } else { first_divergence_time(dcv, eps)? };
                row.push(Cell::from_crossing(crossing, failure));
            }
            curves.push(ConvergenceSeries { amplitude: a, mass: m, grids: plan.grids.clone(), records, failure });
        }
        tables.push(VerdictTable { amplitude: a, thresholds: plan.eps_c.clone(), masses: plan.masses.clone(), cells });
    }
    Ok((tables, curves))
}

/// `time,cv_<g>...,dcv` rows for plotting.
pub fn convergence_csv(series: &ConvergenceSeries) -> String {
    let coarser = &series.grids[..series.grids.len() - 1];
    let mut out = String::from("time");
    for g in coarser {
        write!(out, ",cv_{g}").unwrap();
    }
    out.push_str(",dcv\n");
    let dcv_curve = &series.records[series.grids.len() - 3];
    for rec in &series.records[0] {
        write!(out, "{}", rec.time).unwrap();
        for curve in &series.records {
            match curve.iter().find(|r| r.time == rec.time) {
                Some(r) => write!(out, ",{:?}", r.cv).unwrap(),
                None => out.push(','),
            }
        }
        match dcv_curve.iter().find(|r| r.time == rec.time).and_then(|r| r.dcv) {
            Some(d) => writeln!(out, ",{d:?}").unwrap(),
            None => out.push_str(",\n"),
        }
    }
    out
}

/// `time,sn,ratio` rows for plotting.
pub fn stability_csv(series: &SnapshotSeries) -> String {
    let mut out = String::from("time,sn,ratio\n");
    for r in stability_records(series) {
        writeln!(out, "{},{},{:?}", r.time, r.sn_count, r.ratio).unwrap();
    }
    out
}

/// Writes `contents` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, contents: &str) -> Result<(), HarnessError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(name);
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
