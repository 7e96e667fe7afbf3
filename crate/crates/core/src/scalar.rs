//! Scalar abstraction shared by the generic numerical modules.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Real floating-point type usable by the mixture, basis, prior and
/// prediction code. Implemented for `f32` and `f64`.
pub trait Scalar:
    RealField + Copy + FromPrimitive + ToPrimitive + Serialize + DeserializeOwned + Send + Sync + 'static
{
    /// Converts an `f64` constant into this scalar type.
    #[inline]
    fn lit(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("representable constant")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }

    /// Tolerance used for "sums to one" style invariant checks.
    fn normalization_tolerance() -> Self {
        let eps = Self::default_epsilon().as_f64();
        Self::lit((1e3 * eps).max(1e-12))
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
