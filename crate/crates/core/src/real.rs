//! Floating-point abstraction so the same numeric code runs in f32
//! (the library's working precision) and f64 (oracles and grad checks).

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Scalar type usable by every numeric routine in the crate.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    /// dtype tag used by the binary tensor format (0 = f32, 1 = f64).
    const DTYPE: u8;

    fn of_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// One standard-normal draw in this precision.
    fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
}

impl Real for f32 {
    const DTYPE: u8 = 0;

    #[inline]
    fn of_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
}

impl Real for f64 {
    const DTYPE: u8 = 1;

    #[inline]
    fn of_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline]
    fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
}
