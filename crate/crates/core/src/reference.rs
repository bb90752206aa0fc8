//! Independent oracles used to check the scheme: the closed-form solution of
//! the linear (`lambda = 0`) equation for single-mode data, and a dense
//! brute-force solver for the implicit step on tiny lattices.

use std::sync::Arc;

use thiserror::Error;

use crate::lattice::{Field, GridSpec};
use crate::real::{max_abs, Real};
use crate::scheme::{FieldState, PhysicsParams};

/// Largest lattice [`brute_force_step`] accepts.
pub const BRUTE_FORCE_MAX_POINTS: usize = 64;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReferenceError {
    #[error("closed-form solution requires lambda = 0")]
    Nonlinear,
    #[error("brute-force solver limited to {max} nodes, got {points}")]
    TooLarge { points: usize, max: usize },
    #[error("damped fixed-point iteration stalled after {iterations} iterations (defect {defect:e})")]
    NonConvergence { iterations: usize, defect: f64 },
}

/// Exact solution of the linear equation for the data
/// `phi(0, x) = A cos(k x)`, `psi(0, x) = k A sin(k x)` with `k = 2 pi`.
///
/// Each Fourier mode oscillates at `omega = c sqrt(k^2 + mu^2)`, giving
/// `phi = A cos(kx) cos(wt) + (c k A / (L0 w)) sin(kx) sin(wt)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearModeSolution<T> {
    pub amplitude: T,
    pub wavenumber: T,
    pub omega: T,
    pub params: PhysicsParams<T>,
}

impl<T: Real> LinearModeSolution<T> {
    pub fn new(amplitude: T, params: PhysicsParams<T>) -> Result<Self, ReferenceError> {
        if params.lambda != T::zero() {
            return Err(ReferenceError::Nonlinear);
        }
        let k = T::TAU();
        let omega = params.c * (k * k + params.mass_term()).sqrt();
        Ok(Self { amplitude, wavenumber: k, omega, params })
    }

    /// Amplitude of the `sin(kx) sin(wt)` term.
    fn sine_amplitude(&self) -> T {
        self.params.c * self.wavenumber * self.amplitude / (self.params.l0 * self.omega)
    }

    /// `d phi / dx`.
    pub fn gradient(&self, x: T, t: T) -> T {
        let (k, w) = (self.wavenumber, self.omega);
        -self.amplitude * k * (k * x).sin() * (w * t).cos() + self.sine_amplitude() * k * (k * x).cos() * (w * t).sin()
    }

    /// `-phi_tt / c^2 + phi_xx - mu^2 phi` from the term-wise second derivatives.
    pub fn continuum_defect(&self, x: T, t: T) -> T {
        let (k, w) = (self.wavenumber, self.omega);
        let cos_part = self.amplitude * (k * x).cos() * (w * t).cos();
        let sin_part = self.sine_amplitude() * (k * x).sin() * (w * t).sin();
        let phi_tt = -w * w * (cos_part + sin_part);
        let phi_xx = -k * k * (cos_part + sin_part);
        let c = self.params.c;
        -phi_tt / (c * c) + phi_xx - self.params.mass_term() * (cos_part + sin_part)
    }

    /// Continuum energy on the unit cell, by the trapezoid rule with `n` nodes
    /// (exact for trigonometric polynomials of degree below `n/2`).
    pub fn continuum_energy(&self, t: T, n: usize) -> T {
        let l0 = self.params.l0;
        let mu2 = self.params.mass_term();
        let h = T::one() / T::of_usize(n);
        let sum: T = (0..n)
            .map(|k| {
                let x = T::lit(-0.5) + T::of_usize(k) * h;
                let (phi, psi) = linear_exact(x, t, self);
                let dx = self.gradient(x, t);
                l0 / T::lit(2.0) * (psi * psi / (l0 * l0) + dx * dx + mu2 * phi * phi)
            })
            .sum();
        sum * h
    }

    /// Lattice state sampled at time `t`.
    pub fn sample(&self, grid: Arc<GridSpec<T>>, t: T) -> FieldState<T> {
        let phi = Field::from_fn(grid.clone(), |x| linear_exact(x[0], t, self).0).expect("finite closed form");
        let psi = Field::from_fn(grid, |x| linear_exact(x[0], t, self).1).expect("finite closed form");
        FieldState::new(phi, psi, 0).expect("shared grid")
    }

    /// Discrete L2 error `sqrt(sum_k (phi_k - phi(t, x_k))^2 dx)` of a 1-D state.
    pub fn l2_error(&self, state: &FieldState<T>, t: T) -> T {
        let grid = state.grid();
        let dx = grid.cell_volume();
        let sum: T = state
            .phi()
            .values()
            .iter()
            .enumerate()
            .map(|(k, &v)| {
                let e = v - linear_exact(grid.coordinate(0, k), t, self).0;
                e * e
            })
            .sum();
        (sum * dx).sqrt()
    }
}

/// `(phi, psi)` of the closed-form linear solution at `(x, t)`, with `psi = L0 phi_t / c`.
pub fn linear_exact<T: Real>(x: T, t: T, sol: &LinearModeSolution<T>) -> (T, T) {
    let (k, w) = (sol.wavenumber, sol.omega);
    let b = sol.sine_amplitude();
    let phi = sol.amplitude * (k * x).cos() * (w * t).cos() + b * (k * x).sin() * (w * t).sin();
    let phi_t = -sol.amplitude * w * (k * x).cos() * (w * t).sin() + b * w * (k * x).sin() * (w * t).cos();
    (phi, sol.params.l0 * phi_t / sol.params.c)
}

/// Dense wide-Laplacian matrix built by enumerating the `+-2` neighbours of every node.
fn dense_wide_laplacian<T: Real>(grid: &GridSpec<T>) -> Vec<Vec<T>> {
    let n = grid.len();
    let strides = grid.strides();
    let mut w = vec![vec![T::zero(); n]; n];
    for row in 0..n {
        let idx = grid.unravel(row);
        for axis in 0..grid.dim() {
            let len = grid.points()[axis];
            let dx = grid.dx(axis);
            let coeff = T::one() / (T::lit(4.0) * dx * dx);
            let base = row - idx[axis] * strides[axis];
            let fwd = base + ((idx[axis] + 2) % len) * strides[axis];
            let bwd = base + ((idx[axis] + len - 2) % len) * strides[axis];
            w[row][fwd] = w[row][fwd] + coeff;
            w[row][bwd] = w[row][bwd] + coeff;
            w[row][row] = w[row][row] - T::lit(2.0) * coeff;
        }
    }
    w
}

/// Plain divided difference of `|x|^(p+1)` with a wide coincidence window.
fn direct_divided_difference<T: Real>(a: T, b: T, p: u32) -> T {
    let q = p as i32 + 1;
    if (a - b).abs() <= T::lit(1e-7) * T::one().max(a.abs()).max(b.abs()) {
        let m = (a + b) / T::lit(2.0);
        T::of_usize(p as usize + 1) * m.abs().powi(q - 2) * m
    } else {
        (a.abs().powi(q) - b.abs().powi(q)) / (a - b)
    }
}

/// Solves the implicit step by damped (factor 1/2) fixed-point iteration on the
/// full `(phi+, psi+)` pair, without elimination or Jacobians, until the scaled
/// defect is below `tol / 10`.
pub fn brute_force_step<T: Real>(
    curr: &FieldState<T>,
    params: &PhysicsParams<T>,
    tol: T,
) -> Result<FieldState<T>, ReferenceError> {
    let grid_arc = curr.phi().grid_arc().clone();
    let grid: &GridSpec<T> = &grid_arc;
    let n = grid.len();
    if n > BRUTE_FORCE_MAX_POINTS {
        return Err(ReferenceError::TooLarge { points: n, max: BRUTE_FORCE_MAX_POINTS });
    }
    let w = dense_wide_laplacian(grid);
    let tau = params.c * grid.dt();
    let l0 = params.l0;
    let half = T::lit(0.5);
    let mu2 = params.mass_term();
    let coupling = params.lambda / T::of_usize(params.p as usize + 1);
    let phi0 = curr.phi().values();
    let psi0 = curr.psi().values();

    let mut phi1 = phi0.to_vec();
    let mut psi1 = psi0.to_vec();
    let force = |phi1: &[T], k: usize| -> T {
        let lap: T = (0..n).map(|j| w[k][j] * (phi1[j] + phi0[j])).sum();
        -coupling * direct_divided_difference(phi1[k], phi0[k], params.p) + half * lap
            - half * mu2 * (phi1[k] + phi0[k])
    };
    let target = tol / T::lit(10.0) * (T::one() + max_abs(phi0));
    let max_iterations = 20_000;
    let mut defect = T::infinity();
    for _ in 0..max_iterations {
        let mut r_phi = vec![T::zero(); n];
        let mut r_psi = vec![T::zero(); n];
        for k in 0..n {
            r_phi[k] = (phi1[k] - phi0[k]) - tau * (psi1[k] + psi0[k]) / (T::lit(2.0) * l0);
            r_psi[k] = (psi1[k] - psi0[k]) - tau * l0 * force(&phi1, k);
        }
        defect = max_abs(&r_phi).max(tau / (T::lit(2.0) * l0) * max_abs(&r_psi));
        if defect <= target {
            let phi = Field::new(grid_arc.clone(), phi1)
                .map_err(|_| ReferenceError::NonConvergence { iterations: max_iterations, defect: f64::NAN })?;
            let psi = Field::new(grid_arc, psi1)
                .map_err(|_| ReferenceError::NonConvergence { iterations: max_iterations, defect: f64::NAN })?;
            return Ok(FieldState::new(phi, psi, curr.time_index() + 1).expect("shared grid"));
        }
        if !defect.is_finite() {
            break;
        }
        let new_phi: Vec<T> = (0..n).map(|k| phi0[k] + tau * (psi1[k] + psi0[k]) / (T::lit(2.0) * l0)).collect();
        let new_psi: Vec<T> = (0..n).map(|k| psi0[k] + tau * l0 * force(&phi1, k)).collect();
        for k in 0..n {
            phi1[k] = half * phi1[k] + half * new_phi[k];
            psi1[k] = half * psi1[k] + half * new_psi[k];
        }
    }
    Err(ReferenceError::NonConvergence { iterations: max_iterations, defect: defect.to_f64().unwrap_or(f64::NAN) })
}
