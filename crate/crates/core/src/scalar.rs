//! Scalar abstraction shared by every numerical module.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar usable throughout the crate: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    /// Converts an `f64` literal into this scalar type.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    /// Converts a count into this scalar type.
    #[inline]
    fn count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Numerically stable `log(sum(exp(xs)))`. Returns `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp<T: Scalar>(xs: impl Iterator<Item = T> + Clone) -> T {
    let max = xs.clone().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    let sum: T = xs.map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub(crate) fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}
