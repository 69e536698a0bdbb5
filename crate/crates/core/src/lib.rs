//! Spectral numerics for harmonic crystals on `Z^d` with `n` components per
//! site: dispersion relations, exact propagation, Gaussian and non-Gaussian
//! initial fields, limit covariances and energy currents.

pub mod covariance;
pub mod current;
pub mod error;
pub mod field;
pub mod grid;
pub mod io;
pub mod lattice;
pub mod propagator;
pub mod random_fields;
pub mod runner;
pub mod stats;

pub use error::{Error, Result};
pub use field::FieldState;
pub use grid::{TorusGrid, Transform};
pub use lattice::{dispersion, DispersionData, InteractionMatrix, ModelSpec};
pub use propagator::{evolve, hamiltonian, Dynamics};
