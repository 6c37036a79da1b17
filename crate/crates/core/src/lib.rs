//! Numerical laboratory for the quantum probability current.
//!
//! The crate computes the current `j = Im(psi* grad psi)/m` of evolving
//! wavepackets, its flux through region boundaries, exit-time densities,
//! flux- and cone-based scattering probabilities, and the first-exit
//! statistics of the associated Bohmian trajectory ensembles.
//!
//! Layout follows the pipeline: [`state`] holds wavefunctions and sampling,
//! [`evolve`] propagates them, [`flux`] integrates the current over surfaces,
//! [`bohm`] integrates trajectories in the current's velocity field, and
//! [`compare`] holds the statistical machinery used to confront the two
//! routes (flux quadrature vs. trajectory ensembles) with each other.
//!
//! Everything is deterministic: sampling takes explicit seeds, reductions
//! run in index order, and results are bitwise independent of the worker
//! count (the `parallel` feature enables rayon data-parallel inner loops;
//! without it the same code paths run sequentially).

pub mod bohm;
pub mod compare;
pub mod error;
pub mod evolve;
pub mod exec;
pub mod flux;
pub mod numeric;
pub mod state;

pub use error::{CoreError, Result};

/// Cartesian point/vector; 1-d states use component 0 and zero the rest.
pub type Point = [f64; 3];

pub(crate) fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn norm(a: Point) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn add(a: Point, b: Point) -> Point {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub(crate) fn scale(a: Point, s: f64) -> Point {
    [a[0] * s, a[1] * s, a[2] * s]
}
