//! Accelerated multi-coil MRI reconstruction at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: complex volumes and centered unitary FFTs
//! - [`sampling`]: variable-density Poisson-disc and regular k-space masks
//! - [`forward`]: the multi-coil operator `A`, its adjoint, coil-map estimation
//! - [`phantoms`]: synthetic phantoms, coil maps and noisy acquisitions
//! - [`baselines`]: total-variation compressed sensing by iterative soft thresholding
//! - [`net`]: the unrolled network (data-consistency plus dense-skip conv regularizers)
//! - [`metrics`]: complex SSIM loss with analytic gradient, nMSE, magnitude SSIM
//! - [`training`]: reverse-mode gradients through the unroll, Adam, training loop
//! - [`container`]: the `MRVX` binary container format

pub mod baselines;
pub mod container;
pub mod error;
pub mod forward;
pub mod metrics;
pub mod net;
pub mod numerics;
pub mod phantoms;
pub mod sampling;
pub mod training;

pub use error::{Error, Result};
pub use numerics::ComplexVolume;
pub use num_complex::Complex64;
