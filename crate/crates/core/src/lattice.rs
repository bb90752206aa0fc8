//! Periodic lattice geometry and the finite-difference operators of the scheme.
//!
//! Fields are flattened row-major with axis 0 slowest: the node with per-axis
//! indices `(k_0, .., k_{n-1})` lives at `sum_i k_i * stride_i` where
//! `stride_{n-1} = 1` and `stride_i = stride_{i+1} * N_{i+1}`. Node `k` along an
//! axis sits at `origin + extent * k / N`; index `N` wraps to `0`.
//!
//! The only Laplacian offered is the wide one, the composition of two central
//! differences, which couples `k` to `k +- 2`. On an even `N` this stencil does
//! not see the checkerboard mode `(-1)^k` and splits each axis into two
//! independent sublattices, so grid-scale oscillations are invisible to the
//! Laplacian and are only held in place by the mass and nonlinear terms.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::real::Real;

/// Smallest axis length the wide stencil supports without `k +- 2` aliasing onto `k`.
pub const MIN_POINTS: usize = 5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LatticeError {
    #[error("axis {axis} out of range for a {dim}-dimensional grid")]
    AxisOutOfRange { axis: usize, dim: usize },
    #[error("axis {axis} has {points} points, at least {required} required")]
    GridTooSmall { axis: usize, points: usize, required: usize },
    #[error("expected {expected} values, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("non-finite value at node {index}")]
    NonFinite { index: usize },
    #[error("fields live on different grids")]
    GridMismatch,
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
}

/// Uniform periodic lattice plus the time step used on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec<T> {
    points: Vec<usize>,
    extent: Vec<T>,
    origin: Vec<T>,
    dt: T,
}

impl<T: Real> GridSpec<T> {
    pub fn new(points: Vec<usize>, extent: Vec<T>, origin: Vec<T>, dt: T) -> Result<Self, LatticeError> {
        if points.is_empty() {
            return Err(LatticeError::InvalidGrid("dimension must be at least 1".into()));
        }
        if extent.len() != points.len() || origin.len() != points.len() {
            return Err(LatticeError::InvalidGrid(format!(
                "{} axes but {} extents and {} origins",
                points.len(),
                extent.len(),
                origin.len()
            )));
        }
        for (axis, &n) in points.iter().enumerate() {
            if n < MIN_POINTS {
                return Err(LatticeError::GridTooSmall { axis, points: n, required: MIN_POINTS });
            }
        }
        if extent.iter().any(|&l| !(l > T::zero()) || !l.is_finite()) {
            return Err(LatticeError::InvalidGrid("extents must be positive and finite".into()));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(LatticeError::InvalidGrid("origin must be finite".into()));
        }
        if !(dt > T::zero()) || !dt.is_finite() {
            return Err(LatticeError::InvalidGrid("time step must be positive and finite".into()));
        }
        Ok(Self { points, extent, origin, dt })
    }

    /// The unit periodic cell `[-1/2, 1/2)^dim` with `n` points per axis.
    pub fn unit_cell(dim: usize, n: usize, dt: T) -> Result<Self, LatticeError> {
        Self::new(vec![n; dim], vec![T::one(); dim], vec![T::lit(-0.5); dim], dt)
    }

    /// Unit cell with `dt = dt_ratio * dx`.
    pub fn unit_cell_with_ratio(dim: usize, n: usize, dt_ratio: T) -> Result<Self, LatticeError> {
        let dx = T::one() / T::of_usize(n);
        Self::unit_cell(dim, n, dt_ratio * dx)
    }

    pub fn dim(&self) -> usize {
        self.points.len()
    }

    pub fn points(&self) -> &[usize] {
        &self.points
    }

    pub fn extent(&self) -> &[T] {
        &self.extent
    }

    pub fn origin(&self) -> &[T] {
        &self.origin
    }

    pub fn dt(&self) -> T {
        self.dt
    }

    /// Same geometry with a different time step.
    pub fn with_dt(&self, dt: T) -> Result<Self, LatticeError> {
        Self::new(self.points.clone(), self.extent.clone(), self.origin.clone(), dt)
    }

    /// Spacing along `axis`. Panics on an invalid axis.
    pub fn dx(&self, axis: usize) -> T {
        self.extent[axis] / T::of_usize(self.points[axis])
    }

    /// Total number of nodes.
    pub fn len(&self) -> usize {
        self.points.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Volume of one lattice cell.
    pub fn cell_volume(&self) -> T {
        (0..self.dim()).fold(T::one(), |acc, axis| acc * self.dx(axis))
    }

    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.dim()];
        for axis in (0..self.dim().saturating_sub(1)).rev() {
            strides[axis] = strides[axis + 1] * self.points[axis + 1];
        }
        strides
    }

    /// Coordinate of node `k` along `axis`.
    ///
    /// Computed as `origin + extent * (k / N)` so nested grids that share an
    /// origin and extent produce bitwise identical coordinates at shared nodes.
    pub fn coordinate(&self, axis: usize, k: usize) -> T {
        let n = self.points[axis];
        self.origin[axis] + self.extent[axis] * (T::of_usize(k % n) / T::of_usize(n))
    }

    /// Per-axis indices of a flat node index.
    pub fn unravel(&self, mut index: usize) -> Vec<usize> {
        let mut out = vec![0; self.dim()];
        for axis in (0..self.dim()).rev() {
            out[axis] = index % self.points[axis];
            index /= self.points[axis];
        }
        out
    }

    pub(crate) fn check_axis(&self, axis: usize) -> Result<(), LatticeError> {
        if axis >= self.dim() {
            Err(LatticeError::AxisOutOfRange { axis, dim: self.dim() })
        } else {
            Ok(())
        }
    }

    /// Same spatial lattice (the time step is not compared).
    pub fn same_lattice(&self, other: &Self) -> bool {
        self.points == other.points && self.extent == other.extent && self.origin == other.origin
    }
}

/// Visits every 1-D line of the lattice along `axis` as `(base, stride, len)`.
pub(crate) fn for_each_line<T: Real>(grid: &GridSpec<T>, axis: usize, mut f: impl FnMut(usize, usize, usize)) {
    let n = grid.points[axis];
    let stride = grid.strides()[axis];
    let block = n * stride;
    let total = grid.len();
    let mut outer = 0;
    while outer < total {
        for inner in 0..stride {
            f(outer + inner, stride, n);
        }
        outer += block;
    }
}

/// `out = f(k+1) - f(k-1)` scaled by `1/(2 dx)` along `axis`.
pub(crate) fn central_diff_into<T: Real>(grid: &GridSpec<T>, axis: usize, src: &[T], out: &mut [T]) {
    let scale = T::one() / (T::lit(2.0) * grid.dx(axis));
    for_each_line(grid, axis, |base, stride, n| {
        for k in 0..n {
            let up = base + ((k + 1) % n) * stride;
            let down = base + ((k + n - 1) % n) * stride;
            out[base + k * stride] = (src[up] - src[down]) * scale;
        }
    });
}

/// `out += ((f(k+2) - f(k)) - (f(k) - f(k-2))) / (4 dx^2)` summed over axes.
pub(crate) fn wide_laplacian_into<T: Real>(grid: &GridSpec<T>, src: &[T], out: &mut [T]) {
    out.iter_mut().for_each(|v| *v = T::zero());
    for axis in 0..grid.dim() {
        let dx = grid.dx(axis);
        let scale = T::one() / (T::lit(4.0) * dx * dx);
        for_each_line(grid, axis, |base, stride, n| {
            for k in 0..n {
                let here = src[base + k * stride];
                let up = src[base + ((k + 2) % n) * stride];
                let down = src[base + ((k + n - 2) % n) * stride];
                out[base + k * stride] = out[base + k * stride] + ((up - here) - (here - down)) * scale;
            }
        });
    }
}

/// Real-valued lattice function.
#[derive(Debug, Clone, PartialEq)]
pub struct Field<T> {
    grid: Arc<GridSpec<T>>,
    values: Vec<T>,
}

impl<T: Real> Field<T> {
    pub fn new(grid: Arc<GridSpec<T>>, values: Vec<T>) -> Result<Self, LatticeError> {
        if values.len() != grid.len() {
            return Err(LatticeError::LengthMismatch { expected: grid.len(), found: values.len() });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(LatticeError::NonFinite { index });
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: Arc<GridSpec<T>>) -> Self {
        let n = grid.len();
        Self { grid, values: vec![T::zero(); n] }
    }

    pub fn constant(grid: Arc<GridSpec<T>>, value: T) -> Self {
        let n = grid.len();
        Self { grid, values: vec![value; n] }
    }

    /// Samples `f` at the node coordinates.
    pub fn from_fn(grid: Arc<GridSpec<T>>, mut f: impl FnMut(&[T]) -> T) -> Result<Self, LatticeError> {
        let mut coords = vec![T::zero(); grid.dim()];
        let values = (0..grid.len())
            .map(|index| {
                for (axis, k) in grid.unravel(index).into_iter().enumerate() {
                    coords[axis] = grid.coordinate(axis, k);
                }
                f(&coords)
            })
            .collect();
        Self::new(grid, values)
    }

    /// Internal constructor for values already known to be finite and sized.
    pub(crate) fn from_parts_unchecked(grid: Arc<GridSpec<T>>, values: Vec<T>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        Self { grid, values }
    }

    pub fn grid(&self) -> &GridSpec<T> {
        &self.grid
    }

    pub fn grid_arc(&self) -> &Arc<GridSpec<T>> {
        &self.grid
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn shares_grid(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.grid, &other.grid) || self.grid.same_lattice(&other.grid)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Result<Self, LatticeError> {
        Self::new(self.grid.clone(), self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn shift_forward(&self, axis: usize) -> Result<Self, LatticeError> {
        shift_forward(self, axis)
    }

    pub fn central_diff(&self, axis: usize) -> Result<Self, LatticeError> {
        central_diff(self, axis)
    }

    pub fn wide_laplacian(&self) -> Result<Self, LatticeError> {
        wide_laplacian(self)
    }
}

/// Periodic forward shift: `result[.., k, ..] = f[.., (k + 1) mod N, ..]` along `axis`.
pub fn shift_forward<T: Real>(f: &Field<T>, axis: usize) -> Result<Field<T>, LatticeError> {
    f.grid.check_axis(axis)?;
    let mut out = vec![T::zero(); f.len()];
    for_each_line(&f.grid, axis, |base, stride, n| {
        for k in 0..n {
            out[base + k * stride] = f.values[base + ((k + 1) % n) * stride];
        }
    });
    Ok(Field::from_parts_unchecked(f.grid.clone(), out))
}

/// First-order central difference `(f(k+1) - f(k-1)) / (2 dx)` along `axis`.
pub fn central_diff<T: Real>(f: &Field<T>, axis: usize) -> Result<Field<T>, LatticeError> {
    f.grid.check_axis(axis)?;
    let mut out = vec![T::zero(); f.len()];
    central_diff_into(&f.grid, axis, &f.values, &mut out);
    Ok(Field::from_parts_unchecked(f.grid.clone(), out))
}

/// Sum over axes of the central difference applied twice: a `k +- 2` stencil.
pub fn wide_laplacian<T: Real>(f: &Field<T>) -> Result<Field<T>, LatticeError> {
    for (axis, &n) in f.grid.points.iter().enumerate() {
        if n < MIN_POINTS {
            return Err(LatticeError::GridTooSmall { axis, points: n, required: MIN_POINTS });
        }
    }
    let mut out = vec![T::zero(); f.len()];
    wide_laplacian_into(&f.grid, &f.values, &mut out);
    Ok(Field::from_parts_unchecked(f.grid.clone(), out))
}
