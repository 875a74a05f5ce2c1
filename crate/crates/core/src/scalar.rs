//! Float abstraction so the same graph code runs in f32 for training and
//! f64 for finite-difference gradient checks.

use num_traits::Float;

/// Element type of tensors. Training uses `f32`; gradient checking uses
/// `f64` because central differences are unreliable in single precision.
pub trait Scalar:
    Float + std::fmt::Debug + std::fmt::Display + Default + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn from_usize(n: usize) -> Self;
    fn to_f64(self) -> f64;

    /// Lower clamp applied inside `log` to keep the loss finite.
    fn log_floor() -> Self {
        Self::from_f64(1e-12)
    }
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn from_usize(n: usize) -> Self {
        n as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn from_usize(n: usize) -> Self {
        n as f64
    }
    fn to_f64(self) -> f64 {
        self
    }
}
