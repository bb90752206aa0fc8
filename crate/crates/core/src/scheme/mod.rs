//! Energy-conserving implicit discretisation of the semilinear Klein-Gordon equation
//!
//! ```text
//! -(1/c^2) phi_tt + Laplace(phi) - (c^2 m^2 / hbar^2) phi = lambda |phi|^(p-1) phi
//! ```
//!
//! in canonical form `phi_t / c = psi / L0`, `psi_t / c = L0 (Laplace(phi) - mu^2 phi - lambda |phi|^(p-1) phi)`
//! with `mu^2 = c^2 m^2 / hbar^2`. One step maps `(phi, psi)` at level `l` to
//! level `l + 1` through
//!
//! ```text
//! (phi+ - phi) / (c dt) = (psi+ + psi) / (2 L0)
//! (psi+ - psi) / (c dt) = L0 [ -lambda/(p+1) G(phi+, phi) + W(phi+ + phi)/2 - mu^2 (phi+ + phi)/2 ]
//! ```
//!
//! where `W` is the wide Laplacian and `G` the divided difference of `|x|^(p+1)`.
//! The lattice sum of [`hamiltonian_density`] is invariant under this map.

mod gradient;
mod solver;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lattice::{central_diff_into, wide_laplacian_into, Field, GridSpec, LatticeError};
use crate::real::{max_abs, Real};

pub use gradient::{nonlinear_discrete_gradient, PowerGradient, DEFAULT_EQUAL_VALUE_EPS};
pub use solver::{evolve, evolve_steps, step, Stepper};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SchemeError {
    #[error(
        "nonlinear solve for time index {time_index} did not converge in {iterations} iterations (defect {defect:e})"
    )]
    NonConvergence { time_index: u64, iterations: usize, defect: f64 },
    #[error("non-finite value produced while solving for time index {time_index}")]
    NonFinite { time_index: u64 },
    #[error("states live on different grids")]
    GridMismatch,
    #[error("invalid physical parameters: {0}")]
    InvalidParams(String),
    #[error("invalid solver configuration: {0}")]
    InvalidSolver(String),
    #[error("end time {t_end} precedes the initial time {t_start}")]
    EndBeforeStart { t_start: f64, t_end: f64 },
    #[error(transparent)]
    Lattice(#[from] LatticeError),
}

impl SchemeError {
    /// Time index at which a solver failure occurred, if any.
    pub fn failed_time_index(&self) -> Option<u64> {
        match self {
            SchemeError::NonConvergence { time_index, .. } | SchemeError::NonFinite { time_index } => Some(*time_index),
            _ => None,
        }
    }
}

/// Physical constants and the nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicsParams<T> {
    pub c: T,
    pub hbar: T,
    pub mass: T,
    /// Coefficient of the power nonlinearity, dimension 1/length^2.
    pub lambda: T,
    /// Exponent `p` of `|phi|^(p-1) phi`.
    pub p: u32,
    /// Normalisation length `L0`.
    pub l0: T,
}

impl<T: Real> PhysicsParams<T> {
    pub fn new(c: T, hbar: T, mass: T, lambda: T, p: u32, l0: T) -> Result<Self, SchemeError> {
        let params = Self { c, hbar, mass, lambda, p, l0 };
        params.validate()?;
        Ok(params)
    }

    /// `c = hbar = L0 = 1`.
    pub fn natural_units(mass: T, lambda: T, p: u32) -> Result<Self, SchemeError> {
        Self::new(T::one(), T::one(), mass, lambda, p, T::one())
    }

    pub fn validate(&self) -> Result<(), SchemeError> {
        let positive = |v: T| v > T::zero() && v.is_finite();
        if !positive(self.c) || !positive(self.hbar) || !positive(self.l0) {
            return Err(SchemeError::InvalidParams("c, hbar and L0 must be positive".into()));
        }
        if !(self.mass >= T::zero()) || !self.mass.is_finite() {
            return Err(SchemeError::InvalidParams("mass must be non-negative".into()));
        }
        if !self.lambda.is_finite() {
            return Err(SchemeError::InvalidParams("lambda must be finite".into()));
        }
        if self.p < 3 {
            return Err(SchemeError::InvalidParams(format!("exponent p = {} must be at least 3", self.p)));
        }
        Ok(())
    }

    /// `c^2 m^2 / hbar^2`.
    pub fn mass_term(&self) -> T {
        let cm = self.c * self.mass / self.hbar;
        cm * cm
    }
}

/// Nonlinear-solve controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig<T> {
    /// Relative tolerance on the eliminated defect, see [`scaled_defect`].
    pub tol: T,
    pub max_iters: usize,
    /// Relative width below which `G(a, b)` switches to its coincident limit.
    pub equal_value_eps: T,
}

impl<T: Real> Default for SolverConfig<T> {
    fn default() -> Self {
        Self { tol: T::lit(1e-12), max_iters: 50, equal_value_eps: T::lit(DEFAULT_EQUAL_VALUE_EPS) }
    }
}

impl<T: Real> SolverConfig<T> {
    pub fn validate(&self) -> Result<(), SchemeError> {
        if !(self.tol > T::zero()) {
            return Err(SchemeError::InvalidSolver("tol must be positive".into()));
        }
        if self.max_iters == 0 {
            return Err(SchemeError::InvalidSolver("max_iters must be at least 1".into()));
        }
        if !(self.equal_value_eps >= T::zero()) {
            return Err(SchemeError::InvalidSolver("equal_value_eps must be non-negative".into()));
        }
        Ok(())
    }
}

/// `phi` and its canonical momentum `psi` at one time level.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldState<T> {
    phi: Field<T>,
    psi: Field<T>,
    time_index: u64,
}

impl<T: Real> FieldState<T> {
    pub fn new(phi: Field<T>, psi: Field<T>, time_index: u64) -> Result<Self, SchemeError> {
        if !phi.shares_grid(&psi) {
            return Err(SchemeError::GridMismatch);
        }
        Ok(Self { phi, psi, time_index })
    }

    pub fn zeros(grid: Arc<GridSpec<T>>) -> Self {
        Self { phi: Field::zeros(grid.clone()), psi: Field::zeros(grid), time_index: 0 }
    }

    pub fn phi(&self) -> &Field<T> {
        &self.phi
    }

    pub fn psi(&self) -> &Field<T> {
        &self.psi
    }

    pub fn grid(&self) -> &GridSpec<T> {
        self.phi.grid()
    }

    pub fn time_index(&self) -> u64 {
        self.time_index
    }

    /// `time_index * dt`.
    pub fn time(&self) -> T {
        T::from_u64(self.time_index).expect("time index representable") * self.grid().dt()
    }

    pub fn with_time_index(mut self, time_index: u64) -> Self {
        self.time_index = time_index;
        self
    }

    /// Same configuration with the momentum negated.
    pub fn momentum_reversed(&self) -> Self {
        let psi: Vec<T> = self.psi.values().iter().map(|&v| -v).collect();
        Self {
            phi: self.phi.clone(),
            psi: Field::from_parts_unchecked(self.psi.grid_arc().clone(), psi),
            time_index: self.time_index,
        }
    }

    pub fn into_parts(self) -> (Field<T>, Field<T>, u64) {
        (self.phi, self.psi, self.time_index)
    }
}

/// Per-node discrete energy density
/// `(L0/2) [psi^2/L0^2 + sum_i (D_i phi)^2 + mu^2 phi^2 + 2 lambda/(p+1) |phi|^(p+1)]`
/// with `D_i` the central difference along axis `i`.
pub fn hamiltonian_density<T: Real>(state: &FieldState<T>, params: &PhysicsParams<T>) -> Field<T> {
    let grid = state.grid();
    let phi = state.phi.values();
    let psi = state.psi.values();
    let mu2 = params.mass_term();
    let nonlinear = T::lit(2.0) * params.lambda / T::of_usize(params.p as usize + 1);
    let inv_l0_sq = T::one() / (params.l0 * params.l0);

    let mut gradient_sq = vec![T::zero(); phi.len()];
    let mut scratch = vec![T::zero(); phi.len()];
    for axis in 0..grid.dim() {
        central_diff_into(grid, axis, phi, &mut scratch);
        for (acc, d) in gradient_sq.iter_mut().zip(&scratch) {
            *acc = *acc + *d * *d;
        }
    }
    let half_l0 = params.l0 / T::lit(2.0);
    let values = (0..phi.len())
        .map(|k| {
            let f = phi[k];
            half_l0
                * (psi[k] * psi[k] * inv_l0_sq
                    + gradient_sq[k]
                    + mu2 * f * f
                    + nonlinear * f.abs().powi(params.p as i32 + 1))
        })
        .collect();
    Field::from_parts_unchecked(state.phi.grid_arc().clone(), values)
}

/// Lattice integral of the energy density, summed in node order.
pub fn total_hamiltonian<T: Real>(state: &FieldState<T>, params: &PhysicsParams<T>) -> T {
    let density = hamiltonian_density(state, params);
    let sum = density.values().iter().fold(T::zero(), |acc, &v| acc + v);
    sum * state.grid().cell_volume()
}

/// Defects of both scheme equations for the pair `(next, curr)`.
///
/// Returns `(R_phi, R_psi)`; both vanish iff `next` is the exact scheme
/// successor of `curr`. `next.time_index == curr.time_index + 1` is assumed,
/// not checked, so the reversed pair can be evaluated as well.
pub fn residual<T: Real>(
    next: &FieldState<T>,
    curr: &FieldState<T>,
    params: &PhysicsParams<T>,
    equal_value_eps: T,
) -> Result<(Field<T>, Field<T>), SchemeError> {
    if !next.phi.shares_grid(&curr.phi) {
        return Err(SchemeError::GridMismatch);
    }
    let grid = curr.grid();
    let tau = params.c * grid.dt();
    let l0 = params.l0;
    let two = T::lit(2.0);
    let mu2 = params.mass_term();
    let g = PowerGradient::new(params.p, equal_value_eps);
    let coupling = params.lambda / T::of_usize(params.p as usize + 1);

    let (phi1, psi1) = (next.phi.values(), next.psi.values());
    let (phi0, psi0) = (curr.phi.values(), curr.psi.values());
    let sum: Vec<T> = phi1.iter().zip(phi0).map(|(&a, &b)| a + b).collect();
    let mut lap = vec![T::zero(); sum.len()];
    wide_laplacian_into(grid, &sum, &mut lap);

    let r_phi = (0..sum.len()).map(|k| (phi1[k] - phi0[k]) / tau - (psi1[k] + psi0[k]) / (two * l0)).collect();
    let r_psi = (0..sum.len())
        .map(|k| {
            let force = -coupling * g.value(phi1[k], phi0[k]) + lap[k] / two - mu2 * sum[k] / two;
            (psi1[k] - psi0[k]) / tau - l0 * force
        })
        .collect();
    let grid = curr.phi.grid_arc().clone();
    Ok((Field::from_parts_unchecked(grid.clone(), r_phi), Field::from_parts_unchecked(grid, r_psi)))
}

/// Residual rescaled to the units of `phi`:
/// `max(c dt |R_phi|_inf, (c dt)^2 / (2 L0) |R_psi|_inf)`.
///
/// The second term is the defect of the single `phi`-equation left after
/// eliminating `psi+`; [`step`] drives it below `tol * (1 + |phi|_inf)`.
pub fn scaled_defect<T: Real>(
    next: &FieldState<T>,
    curr: &FieldState<T>,
    params: &PhysicsParams<T>,
    equal_value_eps: T,
) -> Result<T, SchemeError> {
    let (r_phi, r_psi) = residual(next, curr, params, equal_value_eps)?;
    let tau = params.c * curr.grid().dt();
    let a = tau * max_abs(r_phi.values());
    let b = tau * tau / (T::lit(2.0) * params.l0) * max_abs(r_psi.values());
    Ok(a.max(b))
}
