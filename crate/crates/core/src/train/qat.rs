use crate::error::{Error, Result};
use crate::model::CnnModel;
use crate::quant::{weight_range, QuantParams};

/// Output of a fake-quantize node together with its saturation flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FakeQuant {
    pub value: f64,
    pub clamped: bool,
}

/// `S * (clamp(round(r / S + Z)) - Z)`.
pub fn fake_quantize(r: f64, params: &QuantParams) -> f64 {
    fake_quantize_traced(r, params).value
}

pub fn fake_quantize_traced(r: f64, p: &QuantParams) -> FakeQuant {
    let raw = p.raw_code(r);
    let (lo, hi) = (f64::from(p.q_min), f64::from(p.q_max));
    let clamped = !(lo..=hi).contains(&raw);
    let q = raw.clamp(lo, hi);
    FakeQuant { value: p.scale * (q - f64::from(p.zero_point)), clamped }
}

/// Saturated straight-through estimator.
pub fn qat_backward(grad: f64, clamped: bool) -> f64 {
    if clamped {
        0.0
    } else {
        grad
    }
}

/// Fake-quantization parameters for every tensor of a model.
///
/// Weight params follow the current weights; boundary params come from the
/// model's recorded ranges, exactly as `quantize_model` would derive them.
#[derive(Debug, Clone, PartialEq)]
pub struct QatSetup {
    pub input: QuantParams,
    pub weights: Vec<QuantParams>,
    /// Params of each layer's output tensor.
    pub outputs: Vec<QuantParams>,
}

impl QatSetup {
    pub fn new(model: &CnnModel, bits: u32) -> Result<Self> {
        let ranges = model.ranges.as_ref().ok_or(Error::CalibrationRequired)?;
        let boundary: Vec<QuantParams> = ranges
            .boundaries()
            .into_iter()
            .map(|r| QuantParams::from_range(r.with_zero(), bits, true))
            .collect::<Result<_>>()?;
        let weights = model
            .layers()
            .map(|l| QuantParams::from_range(weight_range(&l.weights), bits, true))
            .collect::<Result<_>>()?;
        Ok(Self { input: boundary[0], weights, outputs: boundary[1..].to_vec() })
    }
}
