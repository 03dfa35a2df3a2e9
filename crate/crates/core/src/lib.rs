//! Random model of the Riemann zeta function on short intervals: prime-indexed
//! fields, their Gibbs measures, perturbed free energies, overlap identities,
//! and Poisson-Dirichlet cascade comparisons.

pub mod cascade;
pub mod cli;
pub mod error;
pub mod estimate;
pub mod field;
pub mod free_energy;
pub mod gibbs;
pub mod harness;
pub mod oracle;
pub mod overlap;
pub mod primes;
pub mod report;
pub mod seeds;
pub mod verify;

pub use error::{Error, Result};
pub use estimate::{mc_aggregate, McEstimate};
