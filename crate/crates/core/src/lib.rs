//! Restoring corrupted camera observations with a transformer trained
//! adversarially on paired (corrupted, clean) images.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] — dense n-d tensors with reverse-mode autodiff and Adam
//! - [`imaging`] — PNG I/O, PSNR, reference SSIM, Gaussian blur
//! - [`corruption`] — seeded synthesis of the five sensor corruptions
//! - [`dataset`] — paired dataset construction, manifest, batch iteration
//! - [`model`] — the restoration generator (shifted patch tokenization,
//!   rotary positions, locality self-attention) and its discriminator
//! - [`loss`] — differentiable SSIM plus the composite generator and
//!   discriminator objectives
//! - [`training`] — the adversarial training loop and evaluation reports
//! - [`verify`] — finite-difference gradient suites usable from the CLI

pub mod corruption;
pub mod dataset;
pub mod error;
pub mod imaging;
pub mod loss;
pub mod model;
pub mod scalar;
mod seeding;
pub mod synth;
pub mod tensor;
pub mod training;
pub mod verify;

pub use error::CrtError;
pub use scalar::Scalar;
