//! Scalar abstraction so every kernel runs at f32 (training) and f64 (test
//! oracles) from the same source.

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::Float;

pub trait Real:
    Float
    + ScalarOperand
    + LinalgScalar
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::ops::DivAssign
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// Tolerance used when checking that a vector is L2-normalized.
    fn norm_tolerance() -> Self {
        Self::from_f64(1e-6)
    }
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}
