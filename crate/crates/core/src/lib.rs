//! Energy-conserving finite-difference integration of the semilinear
//! Klein-Gordon equation on a periodic lattice, with oscillation-count and
//! grid-convergence diagnostics and an experiment harness.
//!
//! The numerical core ([`lattice`], [`scheme`], [`reference`], [`diagnostics`])
//! is generic over the scalar type through [`Real`]; the concrete aliases
//! below fix it to `f64` or `f32`. Snapshot files and the harness work in `f64`.

// `!(x > 0)` rejects NaN along with non-positive values; kernels index
// several parallel arrays per loop.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod diagnostics;
pub mod harness;
pub mod lattice;
mod real;
pub mod reference;
pub mod scheme;
pub mod store;

pub use real::Real;

pub type GridSpec64 = lattice::GridSpec<f64>;
pub type GridSpec32 = lattice::GridSpec<f32>;
pub type Field64 = lattice::Field<f64>;
pub type Field32 = lattice::Field<f32>;
pub type FieldState64 = scheme::FieldState<f64>;
pub type FieldState32 = scheme::FieldState<f32>;
pub type PhysicsParams64 = scheme::PhysicsParams<f64>;
pub type PhysicsParams32 = scheme::PhysicsParams<f32>;
pub type SolverConfig64 = scheme::SolverConfig<f64>;
pub type SolverConfig32 = scheme::SolverConfig<f32>;
