//! Scalar abstraction for the numeric parts of the pipeline.
//!
//! Feature extraction, the softmax model and its gradient are written against
//! [`Scalar`] so they can run in `f32` or `f64`. Geometry is exact integer
//! arithmetic and does not go through this trait.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point type usable by the classifier.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from `f64`; used for constants such as the learning rate.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to any float")
    }

    fn of_usize(v: usize) -> Self {
        Self::from_usize(v).expect("usize converts to any float")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Numerically stable softmax of `logits`, written into `out`.
pub fn softmax_into<F: Scalar>(logits: &[F], out: &mut [F]) {
    debug_assert_eq!(logits.len(), out.len());
    let max = logits
        .iter()
        .copied()
        .fold(F::neg_infinity(), |a, b| a.max(b));
    let mut total = F::zero();
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        total = total + *o;
    }
    for o in out.iter_mut() {
        *o = *o / total;
    }
}
