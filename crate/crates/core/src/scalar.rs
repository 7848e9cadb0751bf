//! Numeric traits shared by the combinatorial solvers.
//!
//! Flow capacities and CRF energies are generic so the same code runs on
//! `f64` (the default everywhere), `f32`, and exact integer weights.

use num_traits::{Bounded, NumAssign};
use std::fmt::{Debug, Display};

/// Anything that can be used as an edge capacity in a flow network.
pub trait Capacity:
    Copy + PartialOrd + Debug + Display + NumAssign + Bounded + Send + Sync + 'static
{
    /// Residual capacities at or below this value are treated as saturated.
    fn saturation_tolerance() -> Self;

    /// Lossy conversion used for reporting.
    fn to_f64(self) -> f64;

    fn is_valid_capacity(self) -> bool {
        self >= Self::zero()
    }
}

macro_rules! impl_int_capacity {
    ($($t:ty),*) => {$(
        impl Capacity for $t {
            fn saturation_tolerance() -> Self {
                0
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
        }
    )*};
}

impl_int_capacity!(i32, i64, i128);

impl Capacity for f32 {
    fn saturation_tolerance() -> Self {
        1e-6
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn is_valid_capacity(self) -> bool {
        self.is_finite() && self >= 0.0
    }
}

impl Capacity for f64 {
    fn saturation_tolerance() -> Self {
        1e-12
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn is_valid_capacity(self) -> bool {
        self.is_finite() && self >= 0.0
    }
}

/// Real scalar used for CRF energies and plain (non-taped) loss evaluation.
pub trait Real: Capacity + num_traits::Float + num_traits::FromPrimitive {
    fn lit(v: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(v).expect("literal fits in scalar type")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Sum helper that keeps accumulation order fixed.
pub fn ordered_sum<T: Capacity>(values: impl IntoIterator<Item = T>) -> T {
    values.into_iter().fold(T::zero(), |acc, v| acc + v)
}

pub(crate) fn check_finite(name: &str, data: &[f64]) -> crate::Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(crate::Error::NonFinite(name.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tolerances() {
        assert_eq!(i64::saturation_tolerance(), 0);
        assert!(f64::saturation_tolerance() > 0.0);
        assert!(!f64::NAN.is_valid_capacity());
        assert!(!(-1.0f64).is_valid_capacity());
        assert!(!(-1i64).is_valid_capacity());
        assert_eq!(ordered_sum([1i64, 2, 3]), 6);
    }
}
