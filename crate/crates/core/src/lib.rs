//! Differentially private chance-constrained optimal power flow on radial
//! distribution feeders.

pub mod ccopf;
pub mod conic;
pub mod dopf;
pub mod fixtures;
pub mod grid;
pub mod io;
pub mod mechanism;
pub mod privacy;
pub mod rng;
pub mod validation;
