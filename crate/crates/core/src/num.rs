//! Scalar abstraction: the numeric kernels are generic over f32/f64.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssignOps};

/// Floating-point scalar for all core math: f32 or f64.
pub trait Real:
    Float + FromPrimitive + NumAssignOps + Debug + Display + Default + Send + Sync + 'static
{
    /// Convert from f64, rounding to the nearest representable value.
    fn cast(x: f64) -> Self {
        Self::from_f64(x).expect("f64 value representable in scalar type")
    }

    /// Widen to f64 for reporting and cross-type comparisons.
    fn widen(self) -> f64 {
        self.to_f64().expect("scalar widens to f64")
    }

    fn from_count(n: u64) -> Self {
        Self::from_u64(n).expect("count representable in scalar type")
    }

    fn from_len(n: usize) -> Self {
        Self::from_usize(n).expect("length representable in scalar type")
    }
}

impl Real for f32 {}
impl Real for f64 {}
