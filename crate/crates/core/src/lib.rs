//! Phase-space simulator for a driven Duffing oscillator open to a
//! diffusive environment.
//!
//! The quasi-probability distribution evolves under a master equation
//! whose right-hand side splits into the classical Poisson bracket, the
//! quantum (Moyal) correction, and momentum diffusion. The crate provides
//! the spectral substrate ([`grid`], [`spectral`]), the three operators
//! ([`operators`]), explicit time integration ([`propagator`]), the
//! quantum-classical difference measure `G(t)` and its companions
//! ([`diagnostics`]), sweep/fit orchestration over `(hbar, D)`
//! ([`experiments`]), and file formats plus the command line ([`io`],
//! [`cli`]).

pub mod cli;
pub mod diagnostics;
pub mod experiments;
pub mod grid;
pub mod io;
pub mod operators;
pub mod propagator;
pub mod spectral;

pub use diagnostics::{DiagnosticRecord, GCurve};
pub use grid::{PhaseSpaceField, PhaseSpaceGrid, WignerState};
pub use operators::{BathParams, Coupling, DuffingParams, ModelParams, RhsParts};
pub use propagator::{Scheme, SolverConfig};
