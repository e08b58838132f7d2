//! Scalar abstraction for the numeric kernels.
//!
//! All tensor math is generic over [`Scalar`] so the same kernels run at
//! f32 or f64. The crate-root aliases pin the default precision to f64,
//! which every gradient check and acceptance tolerance assumes.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating-point element type accepted by tensors and graphs.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssignOps + Sum + Send + Sync + Debug + Display + 'static
{
    /// Lossless-enough conversion from f64 literals (constants, seeds, eps).
    fn from_f64_c(v: f64) -> Self {
        Self::from_f64(v).expect("f64 constant representable in scalar type")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
