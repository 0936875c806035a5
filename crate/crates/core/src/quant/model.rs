use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::Normalizer;
use crate::model::{CnnModel, LayerKind, ModelShape, ValueRange};

use super::{quantize, round_half_away, QuantParams, Requantizer};

/// Integer parameters of one layer.
///
/// Biases use scale `S_w * S_x` and zero point 0, so they can be added
/// straight onto the integer accumulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedLayer {
    pub kind: LayerKind,
    pub in_dim: usize,
    pub out_dim: usize,
    pub in_len: usize,
    pub out_len: usize,
    pub relu: bool,
    pub input: QuantParams,
    pub weight: QuantParams,
    pub output: QuantParams,
    pub requant: Requantizer,
    /// `[out][in]` codes.
    pub weights: Vec<Vec<i32>>,
    pub biases: Vec<i32>,
}

impl QuantizedLayer {
    pub fn weight_offset(&self, out: usize, inp: usize) -> i32 {
        self.weights[out][inp] - self.weight.zero_point
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedModel {
    pub shape: ModelShape,
    pub bits: u32,
    pub layers: Vec<QuantizedLayer>,
    #[serde(default)]
    pub normalizer: Option<Normalizer>,
}

impl QuantizedModel {
    pub fn input_params(&self) -> &QuantParams {
        &self.layers[0].input
    }

    pub fn output_params(&self) -> &QuantParams {
        &self.layers.last().expect("at least one layer").output
    }

    /// Quantize a float input vector (channel-major) with the input params.
    pub fn quantize_input(&self, x: &[f64]) -> Vec<i32> {
        let p = self.input_params();
        x.iter().map(|&r| quantize(r, p)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        let specs = self.shape.layers();
        if specs.len() != self.layers.len() {
            return Err(Error::Dimension("layer count does not match shape".into()));
        }
        for (spec, l) in specs.iter().zip(&self.layers) {
            if l.kind != spec.kind || l.in_dim != spec.in_dim || l.out_dim != spec.out_dim {
                return Err(Error::Dimension(format!("layer {} dims do not match shape", spec.index)));
            }
            if l.weights.len() != l.out_dim
                || l.biases.len() != l.out_dim
                || l.weights.iter().any(|r| r.len() != l.in_dim)
            {
                return Err(Error::Dimension(format!("layer {} weight dims", spec.index)));
            }
            for p in [&l.input, &l.weight, &l.output] {
                p.validate()?;
            }
            if l.weights.iter().flatten().any(|&q| !l.weight.contains(q)) {
                return Err(Error::Config(format!("layer {} has weight codes outside range", spec.index)));
            }
        }
        for w in self.layers.windows(2) {
            if w[0].output != w[1].input {
                return Err(Error::Config("adjacent layers disagree on boundary params".into()));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let qm: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        qm.validate()?;
        Ok(qm)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Range of a weight matrix, always containing zero.
pub fn weight_range(weights: &[Vec<f64>]) -> ValueRange {
    let mut r = ValueRange::new(0.0, 0.0);
    for &w in weights.iter().flatten() {
        r.include(w);
    }
    r
}

/// Quantize every layer of a calibrated model to signed `bits`-bit codes.
///
/// Boundary ranges are widened to contain zero so that ReLU (zero) maps to
/// an exact code.
pub fn quantize_model(model: &CnnModel, bits: u32) -> Result<QuantizedModel> {
    model.validate()?;
    let ranges = model.ranges.as_ref().ok_or(Error::CalibrationRequired)?;
    let boundary: Vec<QuantParams> = ranges
        .boundaries()
        .into_iter()
        .map(|r| QuantParams::from_range(r.with_zero(), bits, true))
        .collect::<Result<_>>()?;

    let mut layers = Vec::with_capacity(model.shape.num_layers());
    for spec in model.shape.layers() {
        let params = model.layer(spec.index);
        let input = boundary[spec.index];
        let output = boundary[spec.index + 1];
        let weight = QuantParams::from_range(weight_range(&params.weights), bits, true)?;
        let requant = Requantizer::new(&weight, &input, &output)?;
        let weights = params.weights.iter().map(|row| row.iter().map(|&w| quantize(w, &weight)).collect()).collect();
        let bias_scale = weight.scale * input.scale;
        let biases = params
            .biases
            .iter()
            .map(|&b| {
                let q = round_half_away(b / bias_scale);
                if q.abs() > f64::from(i32::MAX) || q.is_nan() {
                    Err(Error::BiasOverflow { layer: spec.index })
                } else {
                    Ok(q as i32)
                }
            })
            .collect::<Result<_>>()?;
        layers.push(QuantizedLayer {
            kind: spec.kind,
            in_dim: spec.in_dim,
            out_dim: spec.out_dim,
            in_len: spec.in_len,
            out_len: spec.out_len,
            relu: spec.relu(),
            input,
            weight,
            output,
            requant,
            weights,
            biases,
        });
    }
    Ok(QuantizedModel { shape: model.shape.clone(), bits, layers, normalizer: model.normalizer.clone() })
}
