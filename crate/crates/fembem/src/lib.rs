//! Strongly coupled FEM-BEM solver for time-harmonic acoustic transmission.
//!
//! A bounded penetrable object with smoothly varying refractivity and density
//! is embedded in a homogeneous unbounded exterior. The interior pressure is
//! discretised with P1 finite elements on tetrahedra, the exterior is handled
//! by boundary integral operators on the surface triangulation, and the two
//! are coupled strongly through the transmission conditions. Besides the
//! classical Johnson-Nedelec and Costabel couplings, the crate implements a
//! regularised three-field formulation that stays well conditioned at the
//! spurious interior resonances of the conventional couplings, with
//! Laplace-Beltrami or on-surface-radiation-condition (OSRC) regularisers and
//! a family of operator preconditioners (mass, OSRC, incomplete-LU).
//!
//! The `fembem` binary drives the benchmark battery: single solves, wavenumber
//! sweeps with condition-number tracking, and preset formulation comparisons,
//! all emitting CSV/VTK artifacts.

pub mod bem;
pub mod config;
pub mod fem;
pub mod formulations;
pub mod linsolve;
pub mod mesh;
pub mod oracles;
pub mod osrc;
pub mod postprocess;
pub mod problem;
pub mod quadrature;
pub mod runner;
pub mod spaces;
pub mod sparse;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Mesh construction or import failed.
    #[error("mesh error: {0}")]
    Mesh(String),
    /// Problem description is inconsistent (materials, wave, media).
    #[error("problem setup error: {0}")]
    Problem(String),
    /// Operator assembly was asked for an unsupported pairing or failed.
    #[error("assembly error: {0}")]
    Assembly(String),
    /// Kernel evaluation at coincident points.
    #[error("green's function evaluated at coincident points")]
    CoincidentPoints,
    /// A potential evaluation point violates the distance precondition.
    #[error("evaluation point {index} is within one element diameter of the surface (distance {distance:.3e} < {limit:.3e})")]
    PointTooClose {
        index: usize,
        distance: f64,
        limit: f64,
    },
    /// Analytic reference solution misuse (truncation, side mismatch).
    #[error("oracle error: {0}")]
    Oracle(String),
    /// OSRC operator construction failed.
    #[error("osrc error: {0}")]
    Osrc(String),
    /// Formulation assembly rejected the requested combination.
    #[error("formulation error: {0}")]
    Formulation(String),
    /// Linear solver failure (breakdown, singular factorisation, ...).
    #[error("solver error: {0}")]
    Solver(String),
    /// Configuration parsing or validation failure.
    #[error("config error: {0}")]
    Config(String),
    /// Output or input artifact I/O failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
