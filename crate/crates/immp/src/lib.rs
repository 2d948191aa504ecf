//! Canonical sampling of Hamiltonian systems with fast degrees of freedom
//! via implicit mass-matrix penalization.
//!
//! The library extends a system `(q, p)` with auxiliary variables
//! `(z, p_z)` coupled by a holonomic constraint `xi(q) = z / nu`. Sampling
//! the constrained extended dynamics with a Fixman corrector reproduces
//! the exact canonical measure of the slow variables while the fast ones
//! move a factor `nu` slower, which lifts the stability restriction on the
//! timestep.
//!
//! Layout:
//! - [`model`]: potentials, constraint maps, penalties, Hamiltonians;
//! - [`geometry`]: Gram matrices, Fixman corrector, momentum projection;
//! - [`integrators`]: constrained reversible step, midpoint
//!   fluctuation/dissipation step, Metropolized sampler, uncoupled
//!   reference integrator;
//! - [`chain`]: discretized particle-chain model with tridiagonal kernels;
//! - [`spectral`]: mode analysis of the harmonic chain and stability
//!   thresholds;
//! - [`stiff`]: stiff-potential models, effective potentials, the
//!   hard-constraint sampler;
//! - [`stats`]: estimators, distances and significance tests;
//! - [`experiments`]: the runnable studies behind the command-line tool.

pub mod chain;
pub mod config;
pub mod error;
pub mod experiments;
pub mod geometry;
pub mod integrators;
pub mod linalg;
pub mod model;
pub mod models;
pub mod quad;
pub mod rng;
pub mod spectral;
pub mod stats;
pub mod stiff;

pub use error::{Error, Result};
