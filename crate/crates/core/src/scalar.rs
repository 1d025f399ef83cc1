use std::fmt::{Debug, Display};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};
use serde::{de::DeserializeOwned, Serialize};

/// Floating-point scalar the whole crate is generic over: f32 or f64.
///
/// f32 is the training dtype (see the crate-root aliases); f64 is what the
/// numeric test suites instantiate.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + ScalarOperand
    + LinalgScalar
    + Debug
    + Display
    + Serialize
    + DeserializeOwned
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;

    /// Lossy conversion from f64 (the only constant source used in the crate).
    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 converts to any Scalar")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }

    #[inline]
    fn of_usize(x: usize) -> Self {
        Self::of(x as f64)
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
}

/// Descending total order for valid (non-NaN) scores, ties broken by index.
#[inline]
pub fn cmp_score_desc<T: Scalar>(a: (T, usize), b: (T, usize)) -> std::cmp::Ordering {
    b.0.partial_cmp(&a.0)
        .expect("scores must not be NaN")
        .then(a.1.cmp(&b.1))
}
