//! Two-species relativistic Vlasov-Maxwell plasma in a gravitational half-space.
//!
//! The library builds steady states by Picard iteration along characteristics,
//! evolves small perturbations through retarded half-space field representations,
//! and samples the quantitative estimates that govern both problems.

pub mod characteristics;
pub mod config;
pub mod domain;
pub mod dynamic;
pub mod error;
pub mod greens;
#[cfg(test)]
mod invariants;
pub mod io;
pub mod kernels;
pub mod mesh;
pub mod quadrature;
pub mod steady;
pub mod verify;

pub use error::{Error, Result};

/// Three-vector used throughout.
pub type Vec3 = nalgebra::Vector3<f64>;
/// Three-by-three matrix used for kernels.
pub type Mat3 = nalgebra::Matrix3<f64>;
