//! Minimal neural-network toolkit: layers with hand-written backward passes,
//! parameter enumeration, Adam, and finite-difference gradient checks.

pub mod adam;
pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod scalar;

pub use adam::Adam;
pub use layers::{Conv2d, ConvTranspose2d, Dense, InstanceNorm};
pub use params::Params;
pub use scalar::Scalar;
