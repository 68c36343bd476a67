//! Deformable 3D Gaussian reconstruction with a cross-temporal encoder and
//! two-stream training, built on the `diffcore` tape.

pub mod error;
pub mod deform;
pub mod encoder;
pub mod frames;
pub mod gaussian;
pub mod gradsuite;
pub mod io;
pub mod math;
pub mod metrics;
pub mod render;
pub mod synth;
pub mod trainer;

pub use diffcore::Scalar;
pub use error::{Error, Result};
