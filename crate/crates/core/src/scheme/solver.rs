//! Newton solve of the implicit step.
//!
//! Eliminating `psi+ = 2 L0 (u - phi) / tau - psi` (with `tau = c dt`, `u = phi+`)
//! leaves one equation per node,
//!
//! ```text
//! F(u) = (u - phi) - tau psi / L0
//!      + tau^2 [ lambda/(2(p+1)) G(u, phi) - W(u + phi)/4 + mu^2 (u + phi)/4 ] = 0,
//! ```
//!
//! whose Jacobian is a diagonal plus `-tau^2 / (16 dx_i^2)` couplings at `+-2`
//! along every axis. In one dimension those couplings link nodes of stride 2,
//! so the matrix splits into one (odd `N`) or two (even `N`) cyclic tridiagonal
//! systems solved directly. Higher dimensions use Jacobi-preconditioned CG;
//! the Jacobian is symmetric and, for `lambda >= 0`, positive definite.

use crate::lattice::{wide_laplacian_into, Field, GridSpec};
use crate::real::{max_abs, Real};

use super::{FieldState, PhysicsParams, PowerGradient, SchemeError, SolverConfig};

/// Reusable implicit stepper; holds scratch buffers between steps.
#[derive(Debug, Clone)]
pub struct Stepper<T> {
    params: PhysicsParams<T>,
    config: SolverConfig<T>,
    gradient: PowerGradient<T>,
    work: Workspace<T>,
    last_iterations: usize,
}

#[derive(Debug, Clone, Default)]
struct Workspace<T> {
    u: Vec<T>,
    sum: Vec<T>,
    lap: Vec<T>,
    defect: Vec<T>,
    diag: Vec<T>,
    delta: Vec<T>,
    cycles: Vec<Vec<usize>>,
    cycle_len: usize,
    tri: TridiagScratch<T>,
    cg: CgScratch<T>,
}

impl<T: Real> Stepper<T> {
    pub fn new(params: PhysicsParams<T>, config: SolverConfig<T>) -> Result<Self, SchemeError> {
        params.validate()?;
        config.validate()?;
        Ok(Self {
            params,
            config,
            gradient: PowerGradient::new(params.p, config.equal_value_eps),
            work: Workspace::default(),
            last_iterations: 0,
        })
    }

    pub fn params(&self) -> &PhysicsParams<T> {
        &self.params
    }

    pub fn config(&self) -> &SolverConfig<T> {
        &self.config
    }

    /// Newton iterations used by the most recent successful step.
    pub fn last_iterations(&self) -> usize {
        self.last_iterations
    }

    /// Advances `curr` by one time step.
    pub fn step(&mut self, curr: &FieldState<T>) -> Result<FieldState<T>, SchemeError> {
        let grid_arc = curr.phi().grid_arc().clone();
        let grid: &GridSpec<T> = &grid_arc;
        let next_index = curr.time_index() + 1;
        let n = grid.len();
        self.prepare(grid);

        let phi = curr.phi().values();
        let psi = curr.psi().values();
        let p = &self.params;
        let tau = p.c * grid.dt();
        let tau2 = tau * tau;
        let two = T::lit(2.0);
        let quarter = T::lit(0.25);
        let coupling = tau2 * p.lambda / (two * T::of_usize(p.p as usize + 1));
        let mass = tau2 * p.mass_term() * quarter;
        let threshold = self.config.tol * (T::one() + max_abs(phi));

        let mut center = T::one() + mass;
        let mut offdiag = Vec::with_capacity(grid.dim());
        for axis in 0..grid.dim() {
            let dx = grid.dx(axis);
            let w = tau2 / (T::lit(16.0) * dx * dx);
            center = center + two * w;
            offdiag.push(-w);
        }

        let w = &mut self.work;
        for k in 0..n {
            w.u[k] = phi[k] + tau * psi[k] / p.l0;
        }

        let mut iterations = 0;
        loop {
            for k in 0..n {
                w.sum[k] = w.u[k] + phi[k];
            }
            wide_laplacian_into(grid, &w.sum, &mut w.lap);
            let mut defect_norm = T::zero();
            for k in 0..n {
                let r = (w.u[k] - phi[k]) - tau * psi[k] / p.l0 + coupling * self.gradient.value(w.u[k], phi[k])
                    - tau2 * quarter * w.lap[k]
                    + mass * w.sum[k];
                w.defect[k] = r;
                let a = r.abs();
                if !a.is_finite() {
                    return Err(SchemeError::NonFinite { time_index: next_index });
                }
                if a > defect_norm {
                    defect_norm = a;
                }
            }
            if defect_norm <= threshold {
                break;
            }
            if iterations == self.config.max_iters {
                return Err(SchemeError::NonConvergence {
                    time_index: next_index,
                    iterations,
                    defect: defect_norm.to_f64().unwrap_or(f64::NAN),
                });
            }

            for k in 0..n {
                w.diag[k] = center + coupling * self.gradient.partial_first(w.u[k], phi[k]);
            }
            let solved = if grid.dim() == 1 { solve_cycles(w, offdiag[0]) } else { solve_cg(grid, w, &offdiag) };
            if !solved {
                return Err(SchemeError::NonConvergence {
                    time_index: next_index,
                    iterations,
                    defect: defect_norm.to_f64().unwrap_or(f64::NAN),
                });
            }
            for k in 0..n {
                w.u[k] = w.u[k] - w.delta[k];
                if !w.u[k].is_finite() {
                    return Err(SchemeError::NonFinite { time_index: next_index });
                }
            }
            iterations += 1;
        }
        self.last_iterations = iterations;

        let scale = two * p.l0 / tau;
        let mut psi_next = Vec::with_capacity(n);
        for k in 0..n {
            let v = scale * (w.u[k] - phi[k]) - psi[k];
            if !v.is_finite() {
                return Err(SchemeError::NonFinite { time_index: next_index });
            }
            psi_next.push(v);
        }
        let phi_next = w.u.clone();
        Ok(FieldState {
            phi: Field::from_parts_unchecked(grid_arc.clone(), phi_next),
            psi: Field::from_parts_unchecked(grid_arc, psi_next),
            time_index: next_index,
        })
    }

    fn prepare(&mut self, grid: &GridSpec<T>) {
        let n = grid.len();
        let w = &mut self.work;
        if w.u.len() != n {
            for buf in [&mut w.u, &mut w.sum, &mut w.lap, &mut w.defect, &mut w.diag, &mut w.delta] {
                buf.clear();
                buf.resize(n, T::zero());
            }
            w.cycles.clear();
        }
        if grid.dim() == 1 && (w.cycles.is_empty() || w.cycle_len != n) {
            w.cycles = stride_two_cycles(n);
            w.cycle_len = n;
        }
    }
}

/// Orbits of `k -> k + 2 (mod n)`: two cycles for even `n`, one for odd `n`.
fn stride_two_cycles(n: usize) -> Vec<Vec<usize>> {
    let mut seen = vec![false; n];
    let mut cycles = Vec::new();
    for start in 0..n {
        if seen[start] {
            continue;
        }
        let mut cycle = Vec::new();
        let mut k = start;
        while !seen[k] {
            seen[k] = true;
            cycle.push(k);
            k = (k + 2) % n;
        }
        cycles.push(cycle);
    }
    cycles
}

#[derive(Debug, Clone, Default)]
struct TridiagScratch<T> {
    diag: Vec<T>,
    rhs: Vec<T>,
    x: Vec<T>,
    z: Vec<T>,
    corner: Vec<T>,
    gam: Vec<T>,
}

fn solve_cycles<T: Real>(w: &mut Workspace<T>, off: T) -> bool {
    let Workspace { cycles, diag, defect, delta, tri, .. } = w;
    for cycle in cycles.iter() {
        let len = cycle.len();
        tri.diag.clear();
        tri.rhs.clear();
        tri.diag.extend(cycle.iter().map(|&k| diag[k]));
        tri.rhs.extend(cycle.iter().map(|&k| defect[k]));
        if !cyclic_tridiagonal(tri, off) {
            return false;
        }
        for (i, &k) in cycle.iter().enumerate() {
            delta[k] = tri.x[i];
        }
        debug_assert_eq!(tri.x.len(), len);
    }
    true
}

/// Solves the periodic tridiagonal system with constant off-diagonal `off`
/// (including both corners) by Sherman-Morrison on a Thomas solve.
fn cyclic_tridiagonal<T: Real>(s: &mut TridiagScratch<T>, off: T) -> bool {
    let n = s.diag.len();
    debug_assert!(n >= 3);
    let gamma = -s.diag[0];
    s.x.resize(n, T::zero());
    s.z.resize(n, T::zero());
    s.corner.clear();
    s.corner.resize(n, T::zero());
    s.corner[0] = gamma;
    s.corner[n - 1] = off;

    let mut modified = s.diag.clone();
    modified[0] = s.diag[0] - gamma;
    modified[n - 1] = s.diag[n - 1] - off * off / gamma;

    if !thomas(&modified, off, &s.rhs, &mut s.x, &mut s.gam) {
        return false;
    }
    let corner = s.corner.clone();
    if !thomas(&modified, off, &corner, &mut s.z, &mut s.gam) {
        return false;
    }
    let num = s.x[0] + off * s.x[n - 1] / gamma;
    let den = T::one() + s.z[0] + off * s.z[n - 1] / gamma;
    if den == T::zero() || !den.is_finite() {
        return false;
    }
    let fact = num / den;
    for i in 0..n {
        s.x[i] = s.x[i] - fact * s.z[i];
    }
    s.x.iter().all(|v| v.is_finite())
}

fn thomas<T: Real>(diag: &[T], off: T, rhs: &[T], x: &mut [T], gam: &mut Vec<T>) -> bool {
    let n = diag.len();
    gam.clear();
    gam.resize(n, T::zero());
    let mut bet = diag[0];
    if bet == T::zero() {
        return false;
    }
    x[0] = rhs[0] / bet;
    for i in 1..n {
        gam[i] = off / bet;
        bet = diag[i] - off * gam[i];
        if bet == T::zero() {
            return false;
        }
        x[i] = (rhs[i] - off * x[i - 1]) / bet;
    }
    for i in (0..n - 1).rev() {
        x[i] = x[i] - gam[i + 1] * x[i + 1];
    }
    true
}

#[derive(Debug, Clone, Default)]
struct CgScratch<T> {
    r: Vec<T>,
    z: Vec<T>,
    p: Vec<T>,
    ap: Vec<T>,
}

fn apply_jacobian<T: Real>(grid: &GridSpec<T>, diag: &[T], offdiag: &[T], v: &[T], out: &mut [T]) {
    for (k, o) in out.iter_mut().enumerate() {
        *o = diag[k] * v[k];
    }
    for (axis, &w) in offdiag.iter().enumerate() {
        crate::lattice::for_each_line(grid, axis, |base, stride, n| {
            for k in 0..n {
                let up = v[base + ((k + 2) % n) * stride];
                let down = v[base + ((k + n - 2) % n) * stride];
                out[base + k * stride] = out[base + k * stride] + w * (up + down);
            }
        });
    }
}

fn solve_cg<T: Real>(grid: &GridSpec<T>, w: &mut Workspace<T>, offdiag: &[T]) -> bool {
    let n = grid.len();
    let Workspace { diag, defect, delta, cg, .. } = w;
    for buf in [&mut cg.r, &mut cg.z, &mut cg.p, &mut cg.ap] {
        buf.clear();
        buf.resize(n, T::zero());
    }
    delta.iter_mut().for_each(|d| *d = T::zero());
    cg.r.copy_from_slice(defect);
    let rhs_norm = max_abs(defect);
    if rhs_norm == T::zero() {
        return true;
    }
    let target = rhs_norm * T::lit(64.0) * T::epsilon();
    for k in 0..n {
        cg.z[k] = cg.r[k] / diag[k];
    }
    cg.p.copy_from_slice(&cg.z);
    let mut rz: T = cg.r.iter().zip(&cg.z).map(|(&a, &b)| a * b).sum();
    for _ in 0..(10 * n).max(100) {
        apply_jacobian(grid, diag, offdiag, &cg.p, &mut cg.ap);
        let pap: T = cg.p.iter().zip(&cg.ap).map(|(&a, &b)| a * b).sum();
        if !(pap > T::zero()) {
            return false;
        }
        let alpha = rz / pap;
        for k in 0..n {
            delta[k] = delta[k] + alpha * cg.p[k];
            cg.r[k] = cg.r[k] - alpha * cg.ap[k];
        }
        if max_abs(&cg.r) <= target {
            return true;
        }
        for k in 0..n {
            cg.z[k] = cg.r[k] / diag[k];
        }
        let rz_new: T = cg.r.iter().zip(&cg.z).map(|(&a, &b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for k in 0..n {
            cg.p[k] = cg.z[k] + beta * cg.p[k];
        }
    }
    false
}

/// One implicit step with a fresh [`Stepper`].
pub fn step<T: Real>(
    curr: &FieldState<T>,
    params: &PhysicsParams<T>,
    config: &SolverConfig<T>,
) -> Result<FieldState<T>, SchemeError> {
    Stepper::new(*params, *config)?.step(curr)
}

/// Takes `n_steps` steps from `initial`.
///
/// `observer` sees `initial` and then every state whose time index is a
/// multiple of `observe_every` (`0` disables the periodic calls).
pub fn evolve_steps<T: Real>(
    initial: FieldState<T>,
    params: &PhysicsParams<T>,
    config: &SolverConfig<T>,
    n_steps: u64,
    observe_every: u64,
    mut observer: impl FnMut(&FieldState<T>),
) -> Result<FieldState<T>, SchemeError> {
    let mut stepper = Stepper::new(*params, *config)?;
    observer(&initial);
    let mut state = initial;
    for _ in 0..n_steps {
        state = stepper.step(&state)?;
        if observe_every > 0 && state.time_index().is_multiple_of(observe_every) {
            observer(&state);
        }
    }
    Ok(state)
}

/// Steps until `time >= t_end`; see [`evolve_steps`] for the observer cadence.
pub fn evolve<T: Real>(
    initial: FieldState<T>,
    params: &PhysicsParams<T>,
    config: &SolverConfig<T>,
    t_end: T,
    observe_every: u64,
    observer: impl FnMut(&FieldState<T>),
) -> Result<FieldState<T>, SchemeError> {
    let t0 = initial.time();
    if t_end < t0 {
        return Err(SchemeError::EndBeforeStart {
            t_start: t0.to_f64().unwrap_or(f64::NAN),
            t_end: t_end.to_f64().unwrap_or(f64::NAN),
        });
    }
    let dt = initial.grid().dt();
    let span = (t_end - t0) / dt;
    // absorb rounding in t_end / dt before taking the ceiling
    let nearest = span.round();
    let steps = if (span - nearest).abs() <= T::lit(1e-9) * nearest.max(T::one()) { nearest } else { span.ceil() };
    let n_steps = steps.to_u64().unwrap_or(0);
    evolve_steps(initial, params, config, n_steps, observe_every, observer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scheme::{scaled_defect, total_hamiltonian};
    use std::sync::Arc;

    fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
        let n = b.len();
        for col in 0..n {
            let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
            a.swap(col, piv);
            b.swap(col, piv);
            for row in col + 1..n {
                let f = a[row][col] / a[col][col];
                for c in col..n {
                    a[row][c] -= f * a[col][c];
                }
                b[row] -= f * b[col];
            }
        }
        let mut x = vec![0.0; n];
        for row in (0..n).rev() {
            let s: f64 = (row + 1..n).map(|c| a[row][c] * x[c]).sum();
            x[row] = (b[row] - s) / a[row][row];
        }
        x
    }

    #[test]
    fn cycles_cover_lattice() {
        assert_eq!(stride_two_cycles(6), vec![vec![0, 2, 4], vec![1, 3, 5]]);
        assert_eq!(stride_two_cycles(5), vec![vec![0, 2, 4, 1, 3]]);
    }

    #[test]
    fn cyclic_solver_matches_dense() {
        for n in [3usize, 4, 7, 10] {
            let diag: Vec<f64> = (0..n).map(|i| 2.5 + 0.1 * i as f64).collect();
            let rhs: Vec<f64> = (0..n).map(|i| (i as f64 * 0.7).sin()).collect();
            let off = -0.4;
            let mut dense = vec![vec![0.0; n]; n];
            for i in 0..n {
                dense[i][i] = diag[i];
                dense[i][(i + 1) % n] += off;
                dense[i][(i + n - 1) % n] += off;
            }
            let expected = dense_solve(dense, rhs.clone());
            let mut s = TridiagScratch { diag: diag.clone(), rhs: rhs.clone(), ..Default::default() };
            assert!(cyclic_tridiagonal(&mut s, off));
            for i in 0..n {
                assert!((s.x[i] - expected[i]).abs() < 1e-13, "n={n}");
            }
        }
    }

    fn wave_state(dim: usize, n: usize, amplitude: f64) -> FieldState<f64> {
        let grid = Arc::new(GridSpec::unit_cell_with_ratio(dim, n, 0.1).unwrap());
        let two_pi = 2.0 * std::f64::consts::PI;
        let phi = Field::from_fn(grid.clone(), |x| amplitude * (two_pi * x[0]).cos()).unwrap();
        let psi = Field::from_fn(grid, |x| two_pi * amplitude * (two_pi * x[0]).sin()).unwrap();
        FieldState::new(phi, psi, 0).unwrap()
    }

    #[test]
    fn zero_state_is_fixed_point() {
        let grid = Arc::new(GridSpec::<f64>::unit_cell_with_ratio(1, 16, 0.1).unwrap());
        let zero = FieldState::zeros(grid);
        let params = PhysicsParams::natural_units(4.0, 1.0, 5).unwrap();
        let next = step(&zero, &params, &SolverConfig::default()).unwrap();
        assert_eq!(next.time_index(), 1);
        for v in next.phi().values().iter().chain(next.psi().values()) {
            assert_eq!(v.to_bits(), 0.0f64.to_bits());
        }
    }

    #[test]
    fn step_meets_defect_contract_and_conserves() {
        let params = PhysicsParams::natural_units(4.0, 1.0, 5).unwrap();
        let cfg = SolverConfig::default();
        for n in [33usize, 64] {
            let curr = wave_state(1, n, 2.0);
            let next = step(&curr, &params, &cfg).unwrap();
            let d = scaled_defect(&next, &curr, &params, cfg.equal_value_eps).unwrap();
            assert!(d <= 10.0 * cfg.tol * (1.0 + 2.0), "defect {d}");
            let (h0, h1) = (total_hamiltonian(&curr, &params), total_hamiltonian(&next, &params));
            assert!((h1 - h0).abs() <= 10.0 * cfg.tol * h0);
        }
    }

    #[test]
    fn multi_dimensional_step_reduces_to_line() {
        let params = PhysicsParams::natural_units(4.0, 1.0, 5).unwrap();
        let cfg = SolverConfig::default();
        let line = step(&wave_state(1, 16, 2.0), &params, &cfg).unwrap();
        let cube = step(&wave_state(3, 16, 2.0), &params, &cfg).unwrap();
        let plane = 16 * 16;
        for k in 0..16 {
            for j in [0, 37, 255] {
                let v = cube.phi().values()[k * plane + j];
                assert!((v - line.phi().values()[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn non_convergence_is_reported() {
        let params = PhysicsParams::natural_units(4.0, 1.0, 5).unwrap();
        let cfg = SolverConfig { max_iters: 1, tol: 1e-15, ..SolverConfig::default() };
        let curr = wave_state(1, 16, 2.0);
        match step(&curr, &params, &cfg) {
            Err(SchemeError::NonConvergence { time_index, .. }) => assert_eq!(time_index, 1),
            other => panic!("expected NonConvergence, got {other:?}"),
        }
    }

    #[test]
    fn evolve_observer_cadence() {
        let params = PhysicsParams::natural_units(1.0, 1.0, 5).unwrap();
        let cfg = SolverConfig::default();
        let init = wave_state(1, 16, 0.5);
        let mut seen = Vec::new();
        let out = evolve(init.clone(), &params, &cfg, init.time(), 5, |s| seen.push(s.time_index())).unwrap();
        assert_eq!(out, init);
        assert_eq!(seen, vec![0]);

        let mut seen = Vec::new();
        let dt = init.grid().dt();
        let out = evolve(init, &params, &cfg, 20.0 * dt, 5, |s| seen.push(s.time_index())).unwrap();
        assert_eq!(out.time_index(), 20);
        assert_eq!(seen, vec![0, 5, 10, 15, 20]);
    }

    #[test]
    fn evolve_is_splittable() {
        let params = PhysicsParams::natural_units(4.0, 1.0, 5).unwrap();
        let cfg = SolverConfig::default();
        let init = wave_state(1, 24, 2.0);
        let full = evolve_steps(init.clone(), &params, &cfg, 40, 10, |_| {}).unwrap();
        let half = evolve_steps(init, &params, &cfg, 20, 10, |_| {}).unwrap();
        let rest = evolve_steps(half, &params, &cfg, 20, 10, |_| {}).unwrap();
        assert_eq!(full, rest);
    }

    #[test]
    fn evolve_rejects_past_end() {
        let params = PhysicsParams::natural_units(1.0, 1.0, 5).unwrap();
        let init = wave_state(1, 16, 0.5).with_time_index(10);
        assert!(matches!(
            evolve(init, &params, &SolverConfig::default(), 0.0, 1, |_| {}),
            Err(SchemeError::EndBeforeStart { .. })
        ));
    }

    #[test]
    fn single_precision_step() {
        let grid = Arc::new(GridSpec::<f32>::unit_cell_with_ratio(1, 32, 0.1).unwrap());
        let phi = Field::from_fn(grid.clone(), |x| (2.0 * std::f32::consts::PI * x[0]).cos()).unwrap();
        let psi = Field::zeros(grid);
        let state = FieldState::new(phi, psi, 0).unwrap();
        let params = PhysicsParams::natural_units(1.0f32, 1.0, 5).unwrap();
        let cfg = SolverConfig { tol: 1e-5, max_iters: 20, equal_value_eps: 1e-6 };
        let out = evolve_steps(state.clone(), &params, &cfg, 50, 0, |_| {}).unwrap();
        let (h0, h1) = (total_hamiltonian(&state, &params), total_hamiltonian(&out, &params));
        assert!((h1 - h0).abs() <= 1e-4 * h0);
    }
}
