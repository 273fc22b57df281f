//! Kernel eigenfunctions of spatiotemporal data.
//!
//! Simulates the Kuramoto–Sivashinsky equation, builds a Gaussian kernel on
//! delay-embedded product states, factors it with randomly pivoted
//! Cholesky and extracts eigenpairs of its bistochastic normalization.

pub mod bistochastic;
pub mod error;
pub mod io;
pub mod kernel;
pub mod ks;
pub mod linalg;
pub mod pipeline;
pub mod rpcholesky;

pub use error::{Error, Result};
