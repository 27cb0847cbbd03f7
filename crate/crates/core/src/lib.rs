//! Differentiable restricted SCF engine at minimal-basis scale, with the
//! tooling to train learned initial guesses through unrolled solver
//! trajectories and to benchmark them by Fock-build counts.

pub mod autodiff;
pub mod chem_io;
pub mod corpus;
pub mod diis;
pub mod error;
pub mod guess;
pub mod integrals;
pub mod linalg;
pub mod metrics;
pub mod scf;
pub mod train;

pub use error::{Error, Result};
