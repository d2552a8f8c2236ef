//! Scalar abstraction shared by every numerical routine in the crate.
//!
//! Model parameters live in `f32`, statistics and gradient checks in `f64`;
//! everything in between is written once against [`Scalar`].

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use rustfft::FftNum;

/// Floating-point element type (`f32` or `f64`).
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + FftNum
    + Default
    + Debug
    + Display
    + LowerExp
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 is representable in every Scalar")
    }

    /// Widening conversion used wherever statistics accumulate in 64 bits.
    #[inline]
    fn as_f64(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("Scalar converts to f64")
    }

    /// Bytes per element in binary dumps.
    const BYTES: usize;
    /// Element-type tag written into checkpoint and dump headers.
    const DTYPE: u8;
}

impl Scalar for f32 {
    const BYTES: usize = 4;
    const DTYPE: u8 = 0;
}

impl Scalar for f64 {
    const BYTES: usize = 8;
    const DTYPE: u8 = 1;
}
