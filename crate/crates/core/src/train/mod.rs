//! Backpropagation training, range calibration, quantization-aware
//! fine-tuning and channel pruning.

mod backprop;
mod dataset;
mod prune;
mod qat;

pub use backprop::{add_gradient, cross_entropy, sample_gradient, zero_gradient, Gradient};
pub use dataset::{Dataset, Sample};
pub use prune::{kept_count, prune_channels, PruneReport, PrunedLayer};
pub use qat::{fake_quantize, fake_quantize_traced, qat_backward, FakeQuant, QatSetup};

use log::debug;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::{forward, ActivationRanges, CnnModel, Tensor1D, ValueRange};
use crate::quant::{quantized_forward, QuantizedModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// The step size decays linearly to `learning_rate * lr_floor` over the
    /// run; 1.0 keeps it constant.
    pub lr_floor: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub qat_enabled: bool,
    pub qat_bits: u32,
    /// Per-sample gradients are computed with this policy; the reduction is
    /// always sequential in sample order.
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            lr_floor: 0.1,
            epochs: 30,
            batch_size: 16,
            seed: 1,
            qat_enabled: false,
            qat_bits: 7,
            execution: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(0.0..=1.0).contains(&self.lr_floor) {
            return Err(Error::Config(format!("lr floor {} must lie in [0, 1]", self.lr_floor)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.qat_enabled {
            crate::quant::compute_qrange(self.qat_bits, true)?;
        }
        Ok(())
    }
}

fn check_dataset(model: &CnnModel, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    let (n, k) = (model.shape.input_size(), model.shape.output_width());
    for (i, s) in data.samples.iter().enumerate() {
        if s.features.len() != n {
            return Err(Error::Dimension(format!("sample {i} has {} features, model expects {n}", s.features.len())));
        }
        if s.label >= k {
            return Err(Error::Config(format!("sample {i} label {} outside {k} classes", s.label)));
        }
    }
    Ok(())
}

fn as_tensor(model: &CnnModel, x: &[f64]) -> Result<Tensor1D> {
    Tensor1D::new(model.shape.input_channels, model.shape.input_len, x.to_vec())
}

/// Min/max of every boundary tensor over `inputs`.
pub fn calibrate(model: &CnnModel, inputs: &[Vec<f64>], exec: Execution) -> Result<ActivationRanges> {
    if inputs.is_empty() {
        return Err(Error::Config("calibration needs at least one input".into()));
    }
    let per_sample = exec.try_map(inputs, |x| {
        let f = forward(model, &as_tensor(model, x)?)?;
        Ok::<_, Error>(
            f.activations
                .iter()
                .map(|t| {
                    let mut r = ValueRange::new(t.values[0], t.values[0]);
                    t.values.iter().for_each(|&v| r.include(v));
                    r
                })
                .collect::<Vec<_>>(),
        )
    })?;
    let mut acc = per_sample[0].clone();
    for s in &per_sample[1..] {
        for (a, r) in acc.iter_mut().zip(s) {
            a.include(r.min);
            a.include(r.max);
        }
    }
    Ok(ActivationRanges::from_boundaries(&acc))
}

/// Mini-batch SGD on softmax cross-entropy.
///
/// The returned model always carries ranges from a final calibration pass
/// over the dataset. With QAT enabled, the model must already be calibrated;
/// ranges are refreshed at the start of every epoch.
pub fn train(model: &CnnModel, data: &Dataset, cfg: &TrainConfig) -> Result<CnnModel> {
    cfg.validate()?;
    model.validate()?;
    check_dataset(model, data)?;
    let inputs: Vec<Vec<f64>> = data.samples.iter().map(|s| s.features.clone()).collect();
    let mut m = model.clone();
    if cfg.qat_enabled && m.ranges.is_none() {
        m.ranges = Some(calibrate(&m, &inputs, cfg.execution)?);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        let setup = if cfg.qat_enabled {
            m.ranges = Some(calibrate(&m, &inputs, cfg.execution)?);
            Some(QatSetup::new(&m, cfg.qat_bits)?)
        } else {
            None
        };
        order.shuffle(&mut rng);
        let frac = if cfg.epochs > 1 { epoch as f64 / (cfg.epochs - 1) as f64 } else { 0.0 };
        let lr = cfg.learning_rate * (1.0 - (1.0 - cfg.lr_floor) * frac);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results = cfg.execution.try_map(batch, |&i| {
                let s = &data.samples[i];
                sample_gradient(&m, setup.as_ref(), &s.features, s.label)
            })?;
            let mut g = zero_gradient(&m);
            for (loss, sg) in &results {
                total += loss;
                add_gradient(&mut g, sg);
            }
            let step = lr / batch.len() as f64;
            for (layer, gl) in m.layers_mut().zip(&g) {
                for (row, grow) in layer.weights.iter_mut().zip(&gl.weights) {
                    for (w, d) in row.iter_mut().zip(grow) {
                        *w -= step * d;
                    }
                }
                for (b, d) in layer.biases.iter_mut().zip(&gl.biases) {
                    *b -= step * d;
                }
            }
        }
        let mean = total / data.len() as f64;
        let finite = m.layers().all(|l| l.weights.iter().flatten().chain(&l.biases).all(|v| v.is_finite()));
        if !mean.is_finite() || !finite {
            return Err(Error::Diverged(format!("epoch {epoch}: mean loss {mean}")));
        }
        debug!("epoch {epoch}: loss {mean:.5}");
    }
    m.ranges = Some(calibrate(&m, &inputs, cfg.execution)?);
    Ok(m)
}

pub fn predict(model: &CnnModel, inputs: &[Vec<f64>], exec: Execution) -> Result<Vec<usize>> {
    exec.try_map(inputs, |x| Ok(forward(model, &as_tensor(model, x)?)?.class()))
}

/// Classes from the integer reference path.
pub fn predict_quantized(qm: &QuantizedModel, inputs: &[Vec<f64>], exec: Execution) -> Result<Vec<usize>> {
    exec.try_map(inputs, |x| Ok(quantized_forward(qm, &qm.quantize_input(x))?.class))
}

pub fn accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    if predicted.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / predicted.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelShape;
    use rand::Rng;

    fn separable(seed: u64, n: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..n)
            .map(|i| {
                let label = i % 2;
                let centre = if label == 0 { 0.25 } else { 0.75 };
                let features = (0..4).map(|_| centre + rng.random_range(-0.2..0.2)).collect();
                Sample { features, label }
            })
            .collect();
        Dataset { samples }
    }

    fn tiny() -> CnnModel {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        CnnModel::random(ModelShape::new(1, 4, &[3], &[4, 2]).unwrap(), &mut rng).unwrap()
    }

    #[test]
    fn learns_separable_two_class_set() {
        let data = separable(10, 200);
        let cfg = TrainConfig { epochs: 40, ..TrainConfig::default() };
        let m = train(&tiny(), &data, &cfg).unwrap();
        let pred = predict(&m, &data.inputs(), Execution::Sequential).unwrap();
        let acc = accuracy(&pred, &data.labels());
        assert!(acc >= 0.95, "accuracy {acc}");
    }

    #[test]
    fn zero_epochs_only_calibrates() {
        let data = separable(2, 20);
        let m0 = tiny();
        let m = train(&m0, &data, &TrainConfig { epochs: 0, ..TrainConfig::default() }).unwrap();
        assert_eq!(m.conv_layers, m0.conv_layers);
        assert_eq!(m.fc_layers, m0.fc_layers);
        assert!(m.ranges.is_some());
    }

    #[test]
    fn same_seed_is_bitwise_deterministic() {
        let data = separable(3, 64);
        let base = TrainConfig { epochs: 5, ..TrainConfig::default() };
        let a = train(&tiny(), &data, &base).unwrap();
        let b = train(&tiny(), &data, &TrainConfig { execution: Execution::Sequential, ..base.clone() }).unwrap();
        assert_eq!(a, b);
        let c = train(&tiny(), &data, &TrainConfig { seed: 2, ..base }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn recorded_ranges_cover_every_activation() {
        let data = separable(4, 50);
        let m = train(&tiny(), &data, &TrainConfig { epochs: 3, ..TrainConfig::default() }).unwrap();
        let ranges = m.ranges.as_ref().unwrap().boundaries();
        for x in data.inputs() {
            let f = forward(&m, &as_tensor(&m, &x).unwrap()).unwrap();
            for (t, r) in f.activations.iter().zip(&ranges) {
                assert!(t.values.iter().all(|&v| r.contains(v)));
            }
        }
    }

    #[test]
    fn qat_fine_tune_runs_and_calibrates() {
        let data = separable(5, 80);
        let m = train(&tiny(), &data, &TrainConfig { epochs: 40, ..TrainConfig::default() }).unwrap();
        let base = predict(&m, &data.inputs(), Execution::Sequential).unwrap();
        assert!(accuracy(&base, &data.labels()) >= 0.9);
        let cfg =
            TrainConfig { epochs: 5, learning_rate: 0.01, qat_enabled: true, qat_bits: 6, ..TrainConfig::default() };
        let q = train(&m, &data, &cfg).unwrap();
        let pred = predict(&q, &data.inputs(), Execution::Sequential).unwrap();
        assert!(accuracy(&pred, &data.labels()) >= 0.9);
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = tiny();
        assert!(matches!(train(&m, &Dataset::default(), &TrainConfig::default()), Err(Error::Config(_))));
        let bad = Dataset { samples: vec![Sample { features: vec![0.0; 4], label: 7 }] };
        assert!(matches!(train(&m, &bad, &TrainConfig::default()), Err(Error::Config(_))));
        let cfg = TrainConfig { learning_rate: 0.0, ..TrainConfig::default() };
        assert!(train(&m, &separable(1, 4), &cfg).is_err());
        let cfg = TrainConfig { lr_floor: 1.5, ..TrainConfig::default() };
        assert!(train(&m, &separable(1, 4), &cfg).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let mut m = tiny();
        m.layers_mut().flat_map(|l| l.weights.iter_mut().flatten()).for_each(|w| *w = 1e200);
        let r = train(&m, &separable(6, 8), &TrainConfig::default());
        assert!(matches!(r, Err(Error::Diverged(_))), "{r:?}");
    }
}
