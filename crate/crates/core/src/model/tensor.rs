use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channel-major `(channels, length)` tensor. FC activations are stored as
/// `(features, 1)`, so the flat order is the same either way.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor1D {
    pub channels: usize,
    pub length: usize,
    pub values: Vec<f64>,
}

impl Tensor1D {
    pub fn new(channels: usize, length: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 || length == 0 {
            return Err(Error::Dimension("tensor dimensions must be positive".into()));
        }
        if values.len() != channels * length {
            return Err(Error::Dimension(format!("{} values for a {channels}x{length} tensor", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Dimension("tensor contains non-finite values".into()));
        }
        Ok(Self { channels, length, values })
    }

    pub fn zeros(channels: usize, length: usize) -> Self {
        Self { channels, length, values: vec![0.0; channels * length] }
    }

    pub fn at(&self, channel: usize, pos: usize) -> f64 {
        self.values[channel * self.length + pos]
    }

    pub fn set(&mut self, channel: usize, pos: usize, v: f64) {
        self.values[channel * self.length + pos] = v;
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}
