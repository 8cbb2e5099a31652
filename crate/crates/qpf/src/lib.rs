//! Simulation library for continuously monitored open quantum systems.
//!
//! The crate advances three coupled descriptions of a monitored system along a
//! single measurement record:
//!
//! * the exact stochastic master equation for the conditional density matrix,
//! * its linear (unnormalized) counterpart, and
//! * a reduced-order projection filter that evolves coordinates on an
//!   exponential family of unnormalized states.
//!
//! Supporting modules provide the dense Hermitian linear algebra, the system
//! model (Lindblad superoperators, collective spin builders), seeded SDE
//! integration, residual/stability diagnostics, and a reproducible Monte Carlo
//! runner with CSV output.

pub mod diagnostics;
pub mod filter;
pub mod linalg;
pub mod model;
pub mod runner;
pub mod sde;
