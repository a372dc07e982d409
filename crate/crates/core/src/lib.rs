//! Gaussian-process surface temperature emulator whose prior is generated
//! by an impulse-response energy balance model driven by a Matérn forcing
//! prior.

pub mod cli;
pub mod ebm;
pub mod error;
pub mod exec;
pub mod fit;
pub mod gp;
pub mod kernels;
pub mod linalg;
pub mod metrics;
pub mod model;
#[cfg(feature = "oracles")]
pub mod oracles;
pub mod scenario;
pub mod spatial;
pub mod synthetic;

pub use error::{Error, Result};

/// Seed used by every randomised command when none is given.
pub const DEFAULT_SEED: u64 = 7;
