//! Experiment orchestration: plans, single runs, refinement suites and
//! stability sweeps, and their CSV verdict tables.
//!
//! Runs are stored one file per manifest under the plan's output directory,
//! so repeating a plan only recomputes diagnostics.

mod plan;
mod run;
mod tables;

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::diagnostics::DiagnosticsError;
use crate::lattice::LatticeError;
use crate::scheme::SchemeError;
use crate::store::StoreError;

pub use plan::ExperimentPlan;
pub use run::{load_or_run, load_run, make_initial, make_initial_replicated, run_path, run_single, x_line};
pub use tables::{
    convergence_csv, convergence_records, run_refinement_suite, run_stability_sweep, stability_csv, stability_records,
    write_atomic, Cell, ConvergenceSeries, RunSource, VerdictTable,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid plan: {0}")]
    Plan(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("no stored run at {0}")]
    MissingRun(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Scheme(SchemeError),
    #[error(transparent)]
    ThreadPool(#[from] rayon::ThreadPoolBuildError),
}

impl HarnessError {
    /// True for errors caused by the plan or manifest contents.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            HarnessError::Plan(_)
                | HarnessError::Store(StoreError::InvalidManifest(_))
                | HarnessError::Scheme(SchemeError::InvalidParams(_) | SchemeError::InvalidSolver(_))
        )
    }
}

fn tag(value: f64) -> String {
    format!("{value}")
}

/// Writes `stability-A<a>.csv` tables and `stability-A<a>-m<m>.csv` series.
pub fn write_stability_outputs(
    dir: &Path,
    tables: &[VerdictTable],
    runs: &[crate::store::SnapshotSeries],
) -> Result<Vec<PathBuf>, HarnessError> {
    let mut written = Vec::new();
    for t in tables {
        let path = dir.join(format!("stability-A{}.csv", tag(t.amplitude)));
        write_atomic(&path, &t.to_csv())?;
        written.push(path);
    }
    for run in runs {
        let m = &run.manifest;
        let path = dir.join(format!("stability-A{}-m{}.series.csv", tag(m.initial_amplitude), tag(m.physics.mass)));
        write_atomic(&path, &stability_csv(run))?;
    }
    Ok(written)
}

/// Writes `convergence-A<a>.csv` tables and `convergence-A<a>-m<m>.series.csv` curves.
pub fn write_convergence_outputs(
    dir: &Path,
    tables: &[VerdictTable],
    curves: &[ConvergenceSeries],
) -> Result<Vec<PathBuf>, HarnessError> {
    let mut written = Vec::new();
    for t in tables {
        let path = dir.join(format!("convergence-A{}.csv", tag(t.amplitude)));
        write_atomic(&path, &t.to_csv())?;
        written.push(path);
    }
    for c in curves {
        let path = dir.join(format!("convergence-A{}-m{}.series.csv", tag(c.amplitude), tag(c.mass)));
        write_atomic(&path, &convergence_csv(c))?;
    }
    Ok(written)
}
