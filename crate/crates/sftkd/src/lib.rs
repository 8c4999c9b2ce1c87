//! Cascaded CNN reconstruction for undersampled MRI with k-space data-fidelity
//! layers, plus knowledge-distillation training that first shapes the teacher
//! to be student-friendly and then transfers it to a compact student.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense 4-D tensors, 3x3 convolution forward/backward, ReLU,
//!   Adam, and He initialization — the autodiff primitives.
//! - [`kspace`]: centered orthonormal 2-D FFTs, Cartesian line masks, the
//!   undersampling forward operator, zero-filled reconstruction, and the
//!   data-fidelity projection.
//! - [`model`]: cascade blocks (conv stack + data fidelity), the full cascade
//!   model, the student-friendly composite with shared student branches, and
//!   checkpoint serialization.
//! - [`loss`]: L1 reconstruction loss, the three-term composite training
//!   loss, and the five feature-distillation losses (AT, FitNets, SP, FSP, CC).
//! - [`metrics`]: PSNR, SSIM, and the high-frequency error norm.
//! - [`data`]: synthetic ellipse phantoms and the on-disk dataset format.
//! - [`train`]: seeded training loops (baseline, joint composite, distill)
//!   with CSV epoch logs and best-checkpoint tracking.
//! - [`pipeline`]: the end-to-end experiment runner and its artifacts.
//! - [`config`]: the experiment configuration file and its validation.

pub mod config;
pub mod data;
pub mod error;
pub mod kspace;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
