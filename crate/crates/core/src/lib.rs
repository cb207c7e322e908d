//! Ground-state solver for sub-Ohmic spin-boson models built on the multiple
//! Davydov D2 variational state.
//!
//! The crate is organised bottom-up:
//!
//! - [`bath`]: Wilson logarithmic discretization of power-law spectral densities.
//! - [`model`]: merged mode arrays, spin-rotation mapping, single-polaron estimate.
//! - [`ansatz`]: the multi-D2 state, its energy functional and observables.
//! - [`solver`]: relaxed fixed-point iteration with restarts and annealing.
//! - [`oracle`]: exact diagonalization in a truncated Fock basis.
//! - [`transition`]: coupling sweeps, critical-point location, order classification.

pub mod ansatz;
pub mod bath;
pub mod error;
pub mod model;
pub mod oracle;
pub mod solver;
pub mod transition;

pub use ansatz::{Observables, VariationalState};
pub use bath::{BathSpec, DiscretizedBath};
pub use error::{Error, Result};
pub use model::{Layout, ModelParams, RotationMap};
pub use solver::{GroundStateResult, SolverConfig};
