//! Exit laws of random walks in random environment at desk scale: exact and
//! Monte Carlo exit measures, coarse-grained kernels, perturbation expansions,
//! the multiscale kernel flow and the asymptotic formulas used to check them.

pub mod error;
pub mod exitsolver;
pub mod kernelspace;
pub mod lattice;
pub mod linsolve;
pub mod measure;
pub mod rng;
pub mod sparse;
pub mod coarsegrain;
pub mod perturbation;
pub mod multiscale;
pub mod asymptotics;

pub use error::{Error, Result};
