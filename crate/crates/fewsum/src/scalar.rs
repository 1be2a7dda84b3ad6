//! Scalar abstraction for the numeric core.
//!
//! All tensor math is generic over [`Scalar`] so the same kernels run in
//! f32 or f64. The shipped pipelines pin f64 through the crate-root type
//! aliases; f32 exists for experiments where checkpoint compatibility is
//! not needed.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssignOps};

/// Floating-point element type of tensors, parameters, and losses.
///
/// Beyond the usual float ops this adds exact byte/bit conversions, which
/// content hashing and checkpoint I/O rely on for bit-level determinism.
pub trait Scalar:
    Float + FromPrimitive + NumAssignOps + Debug + Display + Default + Send + Sync + 'static
{
    /// Width of one encoded value in bytes (4 for f32, 8 for f64).
    const WIDTH: usize;
    /// Tag byte identifying this scalar type in checkpoint headers.
    const TAG: u8;

    fn from_real(v: f64) -> Self;
    fn to_real(self) -> f64;

    /// Appends the little-endian bit pattern of `self` to `out`.
    fn write_le(self, out: &mut Vec<u8>);
    /// Reads one value from a little-endian byte slice of length `WIDTH`.
    fn read_le(bytes: &[u8]) -> Self;
    /// Raw bit pattern widened to u64; distinguishes -0.0 and NaN payloads.
    fn bits(self) -> u64;
}

impl Scalar for f64 {
    const WIDTH: usize = 8;
    const TAG: u8 = 8;

    #[inline]
    fn from_real(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_real(self) -> f64 {
        self
    }
    #[inline]
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    #[inline]
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("f64 needs 8 bytes"))
    }
    #[inline]
    fn bits(self) -> u64 {
        self.to_bits()
    }
}

impl Scalar for f32 {
    const WIDTH: usize = 4;
    const TAG: u8 = 4;

    #[inline]
    fn from_real(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_real(self) -> f64 {
        self as f64
    }
    #[inline]
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    #[inline]
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("f32 needs 4 bytes"))
    }
    #[inline]
    fn bits(self) -> u64 {
        self.to_bits() as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_preserve_bits() {
        for v in [0.0f64, -0.0, 1.5, f64::MIN_POSITIVE, -123.456e-30] {
            let mut buf = Vec::new();
            v.write_le(&mut buf);
            assert_eq!(f64::read_le(&buf).bits(), v.bits());
        }
        let mut buf = Vec::new();
        1.25f32.write_le(&mut buf);
        assert_eq!(f32::read_le(&buf), 1.25f32);
    }
}
