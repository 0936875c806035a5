//! Float 1D-CNN representation and reference forward pass.
//!
//! Convolutions are pointwise (kernel size 1): each conv layer mixes
//! channels independently at every position, then applies ReLU and a
//! window-2 / stride-2 max pool whose odd tail element passes through.
//! Fully-connected layers follow, ReLU on every one except the last.

mod flops;
mod forward;
mod shape;
mod tensor;

pub use flops::{count_flops, FlopsBreakdown};
pub use forward::{argmax_class, argmax_index, forward, Forward};
pub use shape::{ceil_div_pow2, LayerKind, LayerSpec, ModelShape};
pub use tensor::Tensor1D;

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::Normalizer;

/// Weights `[out][in]` and biases `[out]` of one layer.
///
/// Conv layers use the same layout: with kernel size 1 a conv layer is a
/// channel-mixing matrix applied at every position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
}

impl LayerParams {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self { weights: vec![vec![0.0; in_dim]; out_dim], biases: vec![0.0; out_dim] }
    }

    pub fn out_dim(&self) -> usize {
        self.weights.len()
    }

    pub fn in_dim(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    fn check(&self, out_dim: usize, in_dim: usize, what: &str) -> Result<()> {
        if self.weights.len() != out_dim
            || self.biases.len() != out_dim
            || self.weights.iter().any(|r| r.len() != in_dim)
        {
            return Err(Error::Dimension(format!("{what}: expected {out_dim}x{in_dim} weights and {out_dim} biases")));
        }
        if self.weights.iter().flatten().chain(&self.biases).any(|v| !v.is_finite()) {
            return Err(Error::Dimension(format!("{what}: non-finite parameter")));
        }
        Ok(())
    }
}

/// Observed value interval of one tensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueRange {
    pub min: f64,
    pub max: f64,
}

impl ValueRange {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub fn include(&mut self, v: f64) {
        self.min = self.min.min(v);
        self.max = self.max.max(v);
    }

    /// Smallest interval containing `self` and zero.
    pub fn with_zero(self) -> Self {
        Self::new(self.min.min(0.0), self.max.max(0.0))
    }

    pub fn contains(&self, v: f64) -> bool {
        self.min <= v && v <= self.max
    }
}

/// Ranges of every boundary tensor: the input `x`, each hidden output
/// `a[i]`, and the network output `y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationRanges {
    pub x: ValueRange,
    pub a: Vec<ValueRange>,
    pub y: ValueRange,
}

impl ActivationRanges {
    /// Boundary `i` in order x, a1, .., y.
    pub fn boundary(&self, i: usize) -> ValueRange {
        if i == 0 {
            self.x
        } else if i <= self.a.len() {
            self.a[i - 1]
        } else {
            self.y
        }
    }

    pub fn boundaries(&self) -> Vec<ValueRange> {
        let mut v = Vec::with_capacity(self.a.len() + 2);
        v.push(self.x);
        v.extend_from_slice(&self.a);
        v.push(self.y);
        v
    }

    pub fn from_boundaries(b: &[ValueRange]) -> Self {
        assert!(b.len() >= 2, "need at least input and output ranges");
        Self { x: b[0], a: b[1..b.len() - 1].to_vec(), y: b[b.len() - 1] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnnModel {
    pub shape: ModelShape,
    pub conv_layers: Vec<LayerParams>,
    pub fc_layers: Vec<LayerParams>,
    #[serde(default)]
    pub ranges: Option<ActivationRanges>,
    #[serde(default)]
    pub normalizer: Option<Normalizer>,
}

impl CnnModel {
    pub fn zeros(shape: ModelShape) -> Result<Self> {
        shape.validate()?;
        let conv_layers = shape.conv.iter().map(|&(i, o)| LayerParams::zeros(o, i)).collect();
        let fc_layers = shape.fc.iter().map(|&(i, o)| LayerParams::zeros(o, i)).collect();
        Ok(Self { shape, conv_layers, fc_layers, ranges: None, normalizer: None })
    }

    /// He-uniform initialization.
    pub fn random<R: Rng + ?Sized>(shape: ModelShape, rng: &mut R) -> Result<Self> {
        let mut model = Self::zeros(shape)?;
        for layer in model.conv_layers.iter_mut().chain(model.fc_layers.iter_mut()) {
            let bound = (6.0 / layer.in_dim().max(1) as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            for w in layer.weights.iter_mut().flatten() {
                *w = dist.sample(rng);
            }
        }
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        if self.conv_layers.len() != self.shape.conv.len() || self.fc_layers.len() != self.shape.fc.len() {
            return Err(Error::Dimension("layer count does not match shape".into()));
        }
        for (n, (l, &(i, o))) in self.conv_layers.iter().zip(&self.shape.conv).enumerate() {
            l.check(o, i, &format!("conv layer {}", n + 1))?;
        }
        for (m, (l, &(i, o))) in self.fc_layers.iter().zip(&self.shape.fc).enumerate() {
            l.check(o, i, &format!("fc layer {}", m + 1))?;
        }
        if let Some(r) = &self.ranges {
            if r.a.len() + 1 != self.shape.num_layers() {
                return Err(Error::Dimension("range count does not match layer count".into()));
            }
        }
        Ok(())
    }

    /// All layers in execution order.
    pub fn layers(&self) -> impl Iterator<Item = &LayerParams> {
        self.conv_layers.iter().chain(self.fc_layers.iter())
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut LayerParams> {
        self.conv_layers.iter_mut().chain(self.fc_layers.iter_mut())
    }

    pub fn layer(&self, i: usize) -> &LayerParams {
        if i < self.conv_layers.len() {
            &self.conv_layers[i]
        } else {
            &self.fc_layers[i - self.conv_layers.len()]
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let model: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
