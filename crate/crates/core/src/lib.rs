//! Metal artifact reduction (MAR) for CT images built around a weighted
//! convolutional dictionary (WCD) model of the artifact layer.
//!
//! A metal-corrupted CT image decomposes on the non-metal region as
//! `I ⊙ Y = I ⊙ X + I ⊙ A`, where the artifact `A` is encoded as
//! `(D ∗ K) ⊗ M`: a sample-invariant filter dictionary `D`, a per-sample
//! weighting matrix `K` with unit-norm columns, and spatial coefficient
//! maps `M`. The crate provides:
//!
//! - [`tensor`]: the dense convolution kernels the model is built on,
//! - [`model`]: the WCD forward model and analytic gradients/half-steps,
//! - [`solver`]: a classical proximal-gradient solver with analytic proxes,
//! - [`net`]: the unrolled network (learned proximal operators, exact
//!   reverse-mode gradients, a desk-scale trainer, checkpoints),
//! - [`ctsim`]: parallel-beam CT simulation and the sinogram linear
//!   interpolation (LI) baseline,
//! - [`metrics`]: masked PSNR/SSIM,
//! - [`io`]: raw + JSON-sidecar case bundles.

pub mod ctsim;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod net;
pub mod rng;
pub mod solver;
pub mod tensor;

pub use error::{MarError, Result};
