//! Scalar abstraction over the floating-point element type.
//!
//! All numeric code in this crate is generic over [`Scalar`]. Training
//! normally runs in `f32`; gradient checking instantiates the same code
//! at `f64` so central finite differences are trustworthy.

use std::fmt::{Debug, Display};

/// Floating-point element type: `f32` or `f64`.
pub trait Scalar:
    num_traits::Float + num_traits::NumAssignOps + Debug + Display + Default + Send + Sync + 'static
{
    /// Width in bytes of the on-disk little-endian encoding.
    const WIDTH: u8;

    fn from_f64(x: f64) -> Self;
    fn to_f64s(self) -> f64;

    /// Exact little-endian byte encoding (bit pattern, not a decimal print).
    fn write_le(self, out: &mut Vec<u8>);
    /// Inverse of [`Scalar::write_le`]; `bytes` must hold `WIDTH` bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const WIDTH: u8 = 4;

    fn from_f64(x: f64) -> Self {
        x as f32
    }

    fn to_f64s(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Scalar for f64 {
    const WIDTH: u8 = 8;

    fn from_f64(x: f64) -> Self {
        x
    }

    fn to_f64s(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn le_round_trip_is_bit_exact() {
        let values = [0.0f32, -0.0, 1.5, f32::MIN_POSITIVE, 1.0e-30, -7.25e12];
        for v in values {
            let mut buf = Vec::new();
            v.write_le(&mut buf);
            assert_eq!(f32::read_le(&buf).to_bits(), v.to_bits());
        }
        let mut buf = Vec::new();
        0.1f64.write_le(&mut buf);
        assert_eq!(f64::read_le(&buf).to_bits(), 0.1f64.to_bits());
    }
}
