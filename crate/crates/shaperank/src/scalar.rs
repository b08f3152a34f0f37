//! Scalar abstraction over the floating-point types the engine runs on.

use std::cmp::Ordering;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::str::FromStr;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating-point scalar usable for cloud coordinates, feature values and
/// distance scores. Implemented for `f32` and `f64`; `f64` is the default
/// precision of the CLI and of all on-disk formats.
pub trait Scalar:
    Float
    + NumAssign
    + FromPrimitive
    + FromStr
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shorthand for pulling an `f64` constant into the working precision.
#[inline]
pub(crate) fn cast<S: Scalar>(x: f64) -> S {
    S::from_f64(x).expect("f64 constant representable in scalar type")
}

/// Compares two scores that are finite by construction.
///
/// All distances handled by the engine come from validated (finite) inputs,
/// so `partial_cmp` cannot fail here; a NaN reaching this point is a bug.
#[inline]
pub(crate) fn cmp_scores<S: Scalar>(a: S, b: S) -> Ordering {
    a.partial_cmp(&b).expect("non-finite score")
}
