//! Toy conditional diffusion model with self-discovered concept vectors in
//! the denoiser's bottleneck activation space (h-space), plus the policies
//! (fair categorical sampling, fixed safety offsets, prompt-extracted
//! enhancement) and the evaluation harness that measures them.

pub mod concept;
pub mod diffusion;
pub mod error;
pub mod world;
pub mod nn;
pub mod rng;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;
