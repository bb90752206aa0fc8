use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::lattice::{Field, GridSpec};
use crate::scheme::{FieldState, SchemeError, Stepper};
use crate::store::{
    read_series, write_series, Frame, Perturbation, RunManifest, RunStatus, SnapshotSeries, StoreError,
};

use super::HarnessError;

/// `phi = A cos(2 pi x)`, `psi = 2 pi A sin(2 pi x)` on a 1-D grid.
pub fn make_initial(grid: Arc<GridSpec<f64>>, amplitude: f64) -> Result<FieldState<f64>, HarnessError> {
    if grid.dim() != 1 {
        return Err(HarnessError::Unsupported(format!("initial data needs a 1-D grid, got {}-D", grid.dim())));
    }
    make_initial_replicated(grid, amplitude)
}

/// As [`make_initial`], with the x profile copied along every other axis.
pub fn make_initial_replicated(grid: Arc<GridSpec<f64>>, amplitude: f64) -> Result<FieldState<f64>, HarnessError> {
    let phi = Field::from_fn(grid.clone(), |x| amplitude * (2.0 * PI * x[0]).cos())?;
    let psi = Field::from_fn(grid, |x| 2.0 * PI * amplitude * (2.0 * PI * x[0]).sin())?;
    Ok(FieldState::new(phi, psi, 0)?)
}

/// The axis-0 line through index 0 of every other axis.
pub fn x_line<'a>(grid: &GridSpec<f64>, values: &'a [f64]) -> impl Iterator<Item = f64> + 'a {
    let inner: usize = grid.points()[1..].iter().product();
    values.iter().step_by(inner).copied()
}

fn apply(perturbation: &Perturbation, state: FieldState<f64>) -> Result<FieldState<f64>, HarnessError> {
    let grid = state.phi().grid_arc().clone();
    let inner: usize = grid.points()[1..].iter().product();
    let (phi, psi, index) = state.into_parts();
    let mut values = phi.into_values();
    for (i, v) in values.iter_mut().enumerate() {
        let k = i / inner;
        *v += match *perturbation {
            Perturbation::Alternating { amplitude, .. } => {
                if k.is_multiple_of(2) {
                    amplitude
                } else {
                    -amplitude
                }
            }
            Perturbation::Mode { amplitude, .. } => amplitude * (2.0 * PI * grid.coordinate(0, k)).cos(),
        };
    }
    Ok(FieldState::new(Field::new(grid, values)?, psi, index)?)
}

fn frame(time: f64, state: &FieldState<f64>) -> Frame {
    Frame { time, phi: state.phi().values().to_vec(), psi: state.psi().values().to_vec() }
}

/// Evolves the manifest's initial data to `t_end`, recording a frame every
/// `snapshot_cadence` (including `t = 0`).
///
/// Perturbations scheduled at a sample time are applied to the state just
/// before that sample is recorded. Solver failures end the run early with a
/// failed status; earlier frames are kept.
pub fn run_single(manifest: &RunManifest) -> Result<SnapshotSeries, HarnessError> {
    let schedule = manifest.schedule()?;
    let cadence = manifest.snapshot_cadence;
    let mut pending = Vec::with_capacity(manifest.perturbations.len());
    for p in &manifest.perturbations {
        let sample = (p.time() / cadence).round();
        if !(sample >= 0.0) || (sample * cadence - p.time()).abs() > 1e-9 * cadence.max(p.time()) {
            return Err(HarnessError::Plan(format!("perturbation time {} is not a snapshot time", p.time())));
        }
        pending.push((sample as u64, *p));
    }

    let grid = Arc::new(manifest.grid.clone());
    let mut state = make_initial_replicated(grid, manifest.initial_amplitude)?;
    let mut series = SnapshotSeries::new(manifest.clone());
    let mut stepper = Stepper::new(manifest.physics, manifest.solver)?;
    for sample in 0..=schedule.samples {
        if sample > 0 {
            for _ in 0..schedule.steps_per_sample {
                match stepper.step(&state) {
                    Ok(next) => state = next,
                    Err(err) => {
                        let Some(index) = err.failed_time_index() else {
                            return Err(err.into());
                        };
                        log::warn!("run {} failed: {err}", manifest.file_name());
                        series.status =
                            RunStatus::Failed { time: index as f64 * manifest.grid.dt(), reason: err.to_string() };
                        return Ok(series);
                    }
                }
            }
        }
        for (_, p) in pending.iter().filter(|(s, _)| *s == sample) {
            state = apply(p, state)?;
        }
        series.push(frame(sample as f64 * cadence, &state))?;
    }
    Ok(series)
}

/// Location of the snapshot file for `manifest` under `dir`.
pub fn run_path(dir: &Path, manifest: &RunManifest) -> PathBuf {
    dir.join(manifest.file_name())
}

/// Reads the stored run for `manifest`, if a file with a matching manifest exists.
pub fn load_run(dir: &Path, manifest: &RunManifest) -> Result<Option<SnapshotSeries>, HarnessError> {
    let path = run_path(dir, manifest);
    if !path.exists() {
        return Ok(None);
    }
    let series = read_series(&path)?;
    if &series.manifest != manifest {
        return Err(StoreError::Malformed(format!("{} holds a different manifest", path.display())).into());
    }
    Ok(Some(series))
}

/// Returns the stored run if present, otherwise runs and stores it.
pub fn load_or_run(dir: &Path, manifest: &RunManifest) -> Result<SnapshotSeries, HarnessError> {
    if let Some(series) = load_run(dir, manifest)? {
        log::info!("reusing {}", run_path(dir, manifest).display());
        return Ok(series);
    }
    let series = run_single(manifest)?;
    std::fs::create_dir_all(dir)?;
    write_series(&run_path(dir, manifest), &series)?;
    Ok(series)
}

impl From<SchemeError> for HarnessError {
    fn from(err: SchemeError) -> Self {
        HarnessError::Scheme(err)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::stability_count_of;
    use crate::scheme::{total_hamiltonian, PhysicsParams, SolverConfig};
    use crate::store::SCHEMA_VERSION;

    fn manifest(n: usize, amplitude: f64, t_end: f64) -> RunManifest {
        RunManifest {
            schema_version: SCHEMA_VERSION,
            grid: GridSpec::unit_cell_with_ratio(1, n, 0.1).unwrap(),
            physics: PhysicsParams::natural_units(4.0, 1.0, 5).unwrap(),
            solver: SolverConfig::default(),
            initial_amplitude: amplitude,
            snapshot_cadence: 1.0,
            t_end,
            perturbations: vec![],
        }
    }

    #[test]
    fn initial_examples() {
        let grid = Arc::new(GridSpec::unit_cell(1, 5, 0.01).unwrap());
        let zero = make_initial(grid, 0.0).unwrap();
        assert!(zero.phi().values().iter().chain(zero.psi().values()).all(|&v| v == 0.0));

        // four nodes are below the lattice minimum, so evaluate the same
        // coordinates on N = 8 and take every other node
        let grid = Arc::new(GridSpec::unit_cell(1, 8, 0.01).unwrap());
        let s = make_initial(grid, 2.0).unwrap();
        let phi: Vec<f64> = s.phi().values().iter().step_by(2).copied().collect();
        let expected = [-2.0, 0.0, 2.0, 0.0];
        for (a, b) in phi.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        let count = |n| {
            stability_count_of(
                make_initial(Arc::new(GridSpec::unit_cell(1, n, 0.01).unwrap()), 2.0).unwrap().phi().values(),
            )
        };
        for n in [8, 10, 64, 256] {
            assert_eq!(count(n), 2);
        }
        // odd N: the maximum falls between two bitwise-equal nodes, whose zero
        // difference is not a sign change
        assert_eq!(count(9), 1);
        let grid3 = Arc::new(GridSpec::unit_cell(3, 8, 0.01).unwrap());
        assert!(matches!(make_initial(grid3, 1.0), Err(HarnessError::Unsupported(_))));
    }

    #[test]
    fn zero_run_stays_zero() {
        let series = run_single(&manifest(32, 0.0, 2.0)).unwrap();
        assert!(series.is_completed());
        assert_eq!(series.frames.iter().map(|f| f.time).collect::<Vec<_>>(), vec![0.0, 1.0, 2.0]);
        assert!(series.frames.iter().all(|f| f.phi.iter().chain(&f.psi).all(|&v| v == 0.0)));
    }

    #[test]
    fn desk_run_conserves_energy() {
        let m = manifest(64, 2.0, 2.0);
        let series = run_single(&m).unwrap();
        assert!(series.is_completed());
        let grid = Arc::new(m.grid.clone());
        let energy = |f: &Frame| {
            let s = FieldState::new(
                Field::new(grid.clone(), f.phi.clone()).unwrap(),
                Field::new(grid.clone(), f.psi.clone()).unwrap(),
                0,
            )
            .unwrap();
            total_hamiltonian(&s, &m.physics)
        };
        let e0 = energy(&series.frames[0]);
        for f in &series.frames {
            assert!(((energy(f) - e0) / e0).abs() <= 1e-8);
        }
    }

    #[test]
    fn huge_time_step_records_failure() {
        // the scheme itself tolerates any step; what a huge step costs is Newton
        // iterations (about 6 here against 2 at dt = dx/10), so a tight budget
        // turns it into a solver failure
        let mut m = manifest(32, 2.0, 1.0);
        m.solver.max_iters = 4;
        assert!(run_single(&m).unwrap().is_completed());
        m.grid = GridSpec::unit_cell_with_ratio(1, 32, 10.0).unwrap();
        m.snapshot_cadence = m.grid.dt();
        m.t_end = 64.0 * m.grid.dt();
        let series = run_single(&m).unwrap();
        let RunStatus::Failed { time, .. } = series.status else {
            panic!("expected a failed run, got {:?}", series.status)
        };
        let index = (time / m.grid.dt()).round();
        assert_eq!(index, 1.0);
        assert_eq!(time, m.grid.dt());
        assert_eq!(series.frames.len(), 1);
    }

    #[test]
    fn perturbation_lands_on_its_sample() {
        let mut m = manifest(32, 0.0, 2.0);
        m.perturbations = vec![Perturbation::Alternating { time: 1.0, amplitude: 1e-3 }];
        let series = run_single(&m).unwrap();
        assert!(series.frames[0].phi.iter().all(|&v| v == 0.0));
        assert_eq!(series.frames[1].phi[0], 1e-3);
        assert_eq!(series.frames[1].phi[1], -1e-3);
        m.perturbations = vec![Perturbation::Alternating { time: 0.5, amplitude: 1e-3 }];
        assert!(run_single(&m).is_err());
    }

    #[test]
    fn replicated_run_matches_line_run() {
        let m1 = manifest(16, 1.0, 1.0);
        let mut m3 = m1.clone();
        m3.grid = GridSpec::new(vec![16, 5, 5], vec![1.0; 3], vec![-0.5; 3], m1.grid.dt()).unwrap();
        let (a, b) = (run_single(&m1).unwrap(), run_single(&m3).unwrap());
        let last = |s: &SnapshotSeries| s.frames.last().unwrap().clone();
        let line: Vec<f64> = x_line(&m3.grid, &last(&b).phi).collect();
        for (x, y) in line.iter().zip(&last(&a).phi) {
            assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn load_or_run_reuses_files() {
        let dir = tempfile::tempdir().unwrap();
        let m = manifest(16, 1.0, 1.0);
        let first = load_or_run(dir.path(), &m).unwrap();
        let path = run_path(dir.path(), &m);
        let modified = std::fs::metadata(&path).unwrap().modified().unwrap();
        let second = load_or_run(dir.path(), &m).unwrap();
        assert_eq!(first, second);
        assert_eq!(std::fs::metadata(&path).unwrap().modified().unwrap(), modified);
    }
}
