use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::QuantParams;

/// Requantization mantissas are kept strictly below this bound, so they fit
/// a signed 16-bit container and lie in `[2^14, 2^15)` whenever the shift is
/// not saturated.
pub const MANTISSA_LIMIT: i64 = 1 << 15;

const MAX_SHIFT: u32 = 31;

/// Fixed-point approximation `M ~= M0 * 2^-n`.
///
/// Picks the largest `n <= 31` with `round(M * 2^n) < 2^15`. For
/// `M >= 2^-17` the relative error is at most `2^-15`.
pub fn approx_m(m: f64) -> Result<(i32, u32)> {
    if !(m > 0.0 && m.is_finite()) {
        return Err(Error::Multiplier(m));
    }
    for n in (0..=MAX_SHIFT).rev() {
        let m0 = (m * 2f64.powi(n as i32)).round();
        if m0 < MANTISSA_LIMIT as f64 {
            if m0 < 1.0 {
                // M too small to represent with any admissible shift
                return Err(Error::Multiplier(m));
            }
            return Ok((m0 as i32, n));
        }
    }
    Err(Error::Multiplier(m))
}

/// `clamp(round(acc * M0 / 2^n) + Z, q_min, q_max)` with rounding half away
/// from zero, computed on magnitudes: `sign * ((|acc*M0| + 2^(n-1)) >> n)`.
pub fn requantize(acc: i64, m0: i32, shift: u32, zero_point: i32, q_min: i32, q_max: i32) -> i32 {
    let prod = acc * i64::from(m0);
    let half = if shift == 0 { 0 } else { 1i64 << (shift - 1) };
    let mag = (prod.abs() + half) >> shift;
    let scaled = if prod < 0 { -mag } else { mag };
    (scaled + i64::from(zero_point)).clamp(i64::from(q_min), i64::from(q_max)) as i32
}

/// Per-layer output requantizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Requantizer {
    #[serde(rename = "M")]
    pub multiplier: f64,
    #[serde(rename = "M0")]
    pub m0: i32,
    #[serde(rename = "n")]
    pub shift: u32,
    #[serde(rename = "Z_a")]
    pub zero_point: i32,
    pub q_min: i32,
    pub q_max: i32,
}

impl Requantizer {
    /// `M = S_w * S_x / S_a`.
    pub fn new(weight: &QuantParams, input: &QuantParams, output: &QuantParams) -> Result<Self> {
        let multiplier = weight.scale * input.scale / output.scale;
        let (m0, shift) = approx_m(multiplier)?;
        Ok(Self { multiplier, m0, shift, zero_point: output.zero_point, q_min: output.q_min, q_max: output.q_max })
    }

    pub fn apply(&self, acc: i64) -> i32 {
        requantize(acc, self.m0, self.shift, self.zero_point, self.q_min, self.q_max)
    }

    pub fn relative_error(&self) -> f64 {
        let approx = f64::from(self.m0) / 2f64.powi(self.shift as i32);
        (approx - self.multiplier).abs() / self.multiplier
    }
}
