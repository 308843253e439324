//! Scalar abstraction the numeric core is generic over.

use std::fmt::{Debug, Display};

use num_traits::{Float, NumAssignOps};

/// Floating-point scalar for tensors, models, and attacks.
///
/// `from_f64` / `as_f64` bridge configuration values, RNG draws, and the
/// serialized `f64` artifact formats; both directions are exact for `f64`
/// and round once for `f32`.
pub trait Scalar: Float + NumAssignOps + Debug + Display + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
