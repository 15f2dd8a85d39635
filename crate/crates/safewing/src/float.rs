//! Scalar abstraction: all numerics in this crate are generic over [`Float`],
//! implemented for `f32` and `f64`.

use std::fmt;

/// Floating-point scalar usable throughout the simulation and control stack.
///
/// Bundles the `num-traits` arithmetic surface with the serialization and
/// formatting traits the persistence layer needs, so downstream code can take
/// a single `T: Float` bound.
pub trait Float:
    num_traits::Float
    + num_traits::FloatConst
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + num_traits::NumAssign
    + serde::Serialize
    + serde::de::DeserializeOwned
    + fmt::Debug
    + fmt::Display
    + fmt::LowerExp
    + std::iter::Sum
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lift an `f64` constant into `Self`. Panics only for non-representable
    /// values, which cannot happen for the finite literals used in this crate.
    #[inline]
    fn of(v: f64) -> Self {
        num_traits::FromPrimitive::from_f64(v).expect("finite constant")
    }

    /// Lossy view as `f64` (exact for `f64`, widened for `f32`).
    #[inline]
    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Float for f32 {}
impl Float for f64 {}
