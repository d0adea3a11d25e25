//! Scalar abstraction: everything numeric is generic over `Scalar`,
//! implemented for `f32` (default compute precision) and `f64` (test and
//! oracle precision).

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, NumAssign};

pub trait Scalar:
    Float + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("finite f64 converts to scalar")
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("scalar converts to f64")
    }

    /// Additive mask constant: large negative value that underflows to
    /// exactly zero probability after softmax.
    fn mask_fill() -> Self {
        Self::from_f64(-1e9)
    }

    /// Checkpoint dtype tag (0 = f32, 1 = f64).
    fn dtype_tag() -> u8;

    fn byte_width() -> usize;

    fn put_le(self, out: &mut Vec<u8>);

    /// Read one value from exactly `byte_width()` little-endian bytes.
    fn get_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    fn dtype_tag() -> u8 {
        0
    }

    fn byte_width() -> usize {
        4
    }

    fn put_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn get_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes per f32"))
    }
}

impl Scalar for f64 {
    fn dtype_tag() -> u8 {
        1
    }

    fn byte_width() -> usize {
        8
    }

    fn put_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn get_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes per f64"))
    }
}
