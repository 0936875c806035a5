//! Affine fixed-point quantization and the integer-only reference network.
//!
//! A real value `r` and its integer code `q` are related by
//! `r = S (q - Z)`; codes are produced with
//! `q = clamp(round(r / S + Z), q_min, q_max)`. Every `round` in the crate is
//! round-half-away-from-zero, including the requantization shift, so the
//! reference forward pass here and the pipeline simulator agree bit for bit.

mod forward;
mod model;
mod requant;

pub use forward::{quantized_forward, QuantForward};
pub use model::{quantize_model, weight_range, QuantizedLayer, QuantizedModel};
pub use requant::{approx_m, requantize, Requantizer, MANTISSA_LIMIT};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ValueRange;

/// Round half away from zero.
pub fn round_half_away(x: f64) -> f64 {
    x.round()
}

/// Representable code interval for a bit-width.
pub fn compute_qrange(bits: u32, signed: bool) -> Result<(i32, i32)> {
    if !(2..=16).contains(&bits) {
        return Err(Error::BitWidth(bits));
    }
    Ok(if signed { (-(1 << (bits - 1)), (1 << (bits - 1)) - 1) } else { (0, (1 << bits) - 1) })
}

/// `S = (r_max - r_min) / (q_max - q_min)`. A degenerate range yields 1.
pub fn compute_scale(r_min: f64, r_max: f64, q_min: i32, q_max: i32) -> Result<f64> {
    if !r_min.is_finite() || !r_max.is_finite() || r_max < r_min {
        return Err(Error::InvalidRange { min: r_min, max: r_max });
    }
    if r_max == r_min {
        return Ok(1.0);
    }
    Ok((r_max - r_min) / f64::from(q_max - q_min))
}

/// `Z = round(q_max - r_max / S)`, clamped into the code range.
pub fn compute_zero_point(r_max: f64, scale: f64, q_min: i32, q_max: i32) -> i32 {
    let z = round_half_away(f64::from(q_max) - r_max / scale);
    z.clamp(f64::from(q_min), f64::from(q_max)) as i32
}

/// Per-tensor quantization parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    #[serde(rename = "S")]
    pub scale: f64,
    #[serde(rename = "Z")]
    pub zero_point: i32,
    #[serde(rename = "b")]
    pub bits: u32,
    pub signed: bool,
    pub q_min: i32,
    pub q_max: i32,
}

impl QuantParams {
    /// Parameters covering `range`. When `r_min == r_max` the constant-tensor
    /// convention `S = 1, Z = 0` applies.
    pub fn from_range(range: ValueRange, bits: u32, signed: bool) -> Result<Self> {
        let (q_min, q_max) = compute_qrange(bits, signed)?;
        let scale = compute_scale(range.min, range.max, q_min, q_max)?;
        let zero_point = if range.min == range.max {
            0.clamp(q_min, q_max)
        } else {
            compute_zero_point(range.max, scale, q_min, q_max)
        };
        Ok(Self { scale, zero_point, bits, signed, q_min, q_max })
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = compute_qrange(self.bits, self.signed)?;
        if (lo, hi) != (self.q_min, self.q_max) {
            return Err(Error::Config(format!(
                "code range ({}, {}) does not match {} bits",
                self.q_min, self.q_max, self.bits
            )));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Config(format!("scale {} must be positive", self.scale)));
        }
        if !(lo..=hi).contains(&self.zero_point) {
            return Err(Error::Config(format!("zero point {} outside code range", self.zero_point)));
        }
        Ok(())
    }

    /// Offsets `q - Z` reachable by codes of this tensor.
    pub fn offset_range(&self) -> (i32, i32) {
        (self.q_min - self.zero_point, self.q_max - self.zero_point)
    }

    pub fn contains(&self, q: i32) -> bool {
        (self.q_min..=self.q_max).contains(&q)
    }

    /// Unclamped rounded code of `r`, as used by fake quantization to detect
    /// saturation.
    pub fn raw_code(&self, r: f64) -> f64 {
        round_half_away(r / self.scale + f64::from(self.zero_point))
    }
}

pub fn quantize(r: f64, p: &QuantParams) -> i32 {
    let q = p.raw_code(r);
    if q.is_nan() {
        return p.zero_point;
    }
    q.clamp(f64::from(p.q_min), f64::from(p.q_max)) as i32
}

pub fn dequantize(q: i32, p: &QuantParams) -> f64 {
    p.scale * f64::from(q - p.zero_point)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params(scale: f64, zero_point: i32, bits: u32) -> QuantParams {
        let (q_min, q_max) = compute_qrange(bits, true).unwrap();
        QuantParams { scale, zero_point, bits, signed: true, q_min, q_max }
    }

    #[test]
    fn qrange_by_bit_width() {
        assert_eq!(compute_qrange(8, true).unwrap(), (-128, 127));
        assert_eq!(compute_qrange(7, true).unwrap(), (-64, 63));
        assert_eq!(compute_qrange(8, false).unwrap(), (0, 255));
        assert!(matches!(compute_qrange(1, true), Err(Error::BitWidth(1))));
        assert!(matches!(compute_qrange(17, false), Err(Error::BitWidth(17))));
    }

    #[test]
    fn scale_examples() {
        assert_eq!(compute_scale(-1.0, 1.0, -128, 127).unwrap(), 2.0 / 255.0);
        assert_eq!(compute_scale(0.0, 6.0, 0, 255).unwrap(), 6.0 / 255.0);
        assert_eq!(compute_scale(0.0, 0.0, 0, 255).unwrap(), 1.0);
        assert!(compute_scale(1.0, 0.0, 0, 255).is_err());
        let p = QuantParams::from_range(ValueRange::new(0.0, 0.0), 8, true).unwrap();
        assert_eq!((p.scale, p.zero_point), (1.0, 0));
    }

    #[test]
    fn zero_point_examples() {
        let s = compute_scale(0.0, 6.0, 0, 255).unwrap();
        assert_eq!(compute_zero_point(6.0, s, 0, 255), 0);
        // 255 - 6 / (8/255) = 255 - 191.25 = 63.75 -> 64
        let s = compute_scale(-2.0, 6.0, 0, 255).unwrap();
        assert_eq!(compute_zero_point(6.0, s, 0, 255), 64);
    }

    #[test]
    fn symmetric_range_zero_point_follows_rounding_rule() {
        // q_max - r_max/S = 127 - 127.5 = -0.5; candidates are -1 and 0,
        // half-away-from-zero selects -1.
        let s = compute_scale(-1.0, 1.0, -128, 127).unwrap();
        let exact = 127.0 - 1.0 / s;
        assert!((exact + 0.5).abs() < 1e-9);
        let z = compute_zero_point(1.0, s, -128, 127);
        assert!(z == -1 || z == 0);
        assert_eq!(z, -1);
    }

    #[test]
    fn quantize_examples() {
        let p = params(0.25, 0, 8);
        assert_eq!(quantize(0.30, &p), 1);
        assert_eq!(quantize(0.0, &params(0.1, 5, 8)), 5);
        assert_eq!(quantize(1e9, &p), 127);
        assert_eq!(quantize(-1e9, &p), -128);
        assert_eq!(dequantize(5, &params(0.1, 5, 8)), 0.0);
        assert_eq!(dequantize(6, &params(0.5, 5, 8)), 0.5);
    }

    proptest! {
        #[test]
        fn round_trip_within_half_step(lo in -100.0f64..0.0, hi in 0.001f64..100.0, t in 0.0f64..=1.0, bits in 3u32..=12) {
            let p = QuantParams::from_range(ValueRange::new(lo, hi), bits, true).unwrap();
            let r = lo + t * (hi - lo);
            let back = dequantize(quantize(r, &p), &p);
            prop_assert!((back - r).abs() <= p.scale / 2.0 + 1e-9 * (1.0 + r.abs()));
        }

        #[test]
        fn quantize_is_monotone(a in -50.0f64..50.0, b in -50.0f64..50.0, bits in 2u32..=10) {
            let p = QuantParams::from_range(ValueRange::new(-10.0, 20.0), bits, true).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(quantize(lo, &p) <= quantize(hi, &p));
        }

        #[test]
        fn params_are_valid(lo in -10.0f64..=0.0, hi in 0.0f64..10.0, bits in 2u32..=16, signed: bool) {
            let p = QuantParams::from_range(ValueRange::new(lo, hi), bits, signed).unwrap();
            prop_assert!(p.validate().is_ok());
        }
    }
}
