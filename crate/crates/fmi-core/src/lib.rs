//! Vision-conditioned layer normalization for frozen language backbones.
//!
//! Visual tokens steer a text-only transformer by predicting per-token
//! offsets to the affine parameters of selected layer norms. The crate holds
//! the numerics (tensors, norms, conditioners, a small causal transformer),
//! a finite-difference gradient checker, a vision front-end stub, an
//! analytic cost model and representation diagnostics.

pub mod attention;
pub mod conditioning;
pub mod diagnostics;
pub mod cost;
mod error;
pub mod gradcheck;
pub mod io;
pub mod model;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod viln;
pub mod vision;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
