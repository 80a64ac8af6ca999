//! Scalar abstraction shared by the numerical modules.
//!
//! Everything that does arithmetic on survival data, kernels or spectra is
//! written against [`Real`], which is implemented for `f32` and `f64`.

use std::fmt::{Debug, Display};
use std::str::FromStr;

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating point scalar usable by every estimator in this crate.
pub trait Real:
    RealField + Copy + FromPrimitive + ToPrimitive + Display + Debug + FromStr + Send + Sync + 'static
{
    fn neg_infinity() -> Self;
    fn machine_epsilon() -> Self;

    /// Lossy conversion from `f64`; used for literals and external input.
    #[inline]
    fn of(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("representable literal")
    }

    #[inline]
    fn of_usize(x: usize) -> Self {
        <Self as FromPrimitive>::from_usize(x).expect("representable count")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).unwrap_or(f64::NAN)
    }

    #[inline]
    fn is_finite_value(self) -> bool {
        self.to_f64_lossy().is_finite()
    }
}

impl Real for f64 {
    fn neg_infinity() -> Self {
        f64::NEG_INFINITY
    }
    fn machine_epsilon() -> Self {
        f64::EPSILON
    }
}

impl Real for f32 {
    fn neg_infinity() -> Self {
        f32::NEG_INFINITY
    }
    fn machine_epsilon() -> Self {
        f32::EPSILON
    }
}
