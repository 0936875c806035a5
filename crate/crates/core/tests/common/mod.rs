//! Independent oracles shared by integration tests.
#![allow(clippy::needless_range_loop)]
#![allow(dead_code)]

use cnn_dataplane::model::{CnnModel, ModelShape, ValueRange};
use cnn_dataplane::quant::QuantParams;
use cnn_dataplane::train::{fake_quantize_traced, QatSetup};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn weight_mut(m: &mut CnnModel, l: usize, o: usize, i: usize) -> &mut f64 {
    let nc = m.conv_layers.len();
    if l < nc {
        &mut m.conv_layers[l].weights[o][i]
    } else {
        &mut m.fc_layers[l - nc].weights[o][i]
    }
}

/// Random shape with 1..=max_conv conv layers and 1..=max_fc FC layers.
pub fn random_shape(rng: &mut ChaCha8Rng, max_t: usize, max_ch: usize, max_conv: usize, max_fc: usize) -> ModelShape {
    let t = rng.random_range(2..=max_t);
    let conv: Vec<usize> = (0..rng.random_range(1..=max_conv)).map(|_| rng.random_range(1..=max_ch)).collect();
    let fc: Vec<usize> = (0..rng.random_range(1..=max_fc)).map(|_| rng.random_range(1..=max_ch)).collect();
    ModelShape::new(1, t, &conv, &fc).unwrap()
}

/// One fake-quantize node frozen at an evaluation point: in range it acts as
/// `v + residual`, saturated it is the constant `value`.
#[derive(Clone, Copy)]
struct Frozen {
    residual: f64,
    value: f64,
    clamped: bool,
}

/// Kink pattern of one evaluation: ReLU signs and pool winners.
pub type Pattern = Vec<u8>;

/// QAT surrogate loss with every fake-quantize node frozen at `base`.
///
/// Its exact derivative is the straight-through estimate, so central
/// differences of it are a fair check of analytic QAT gradients.
pub struct Surrogate {
    setup: QatSetup,
    nodes: Vec<Frozen>,
}

impl Surrogate {
    pub fn new(base: &CnnModel, bits: u32, x: &[f64]) -> Self {
        let setup = QatSetup::new(base, bits).unwrap();
        let mut s = Surrogate { setup, nodes: Vec::new() };
        let mut rec = Vec::new();
        s.eval(base, x, 0, Some(&mut rec));
        s.nodes = rec;
        s
    }

    fn node(&self, v: f64, p: &QuantParams, k: &mut usize, rec: &mut Option<&mut Vec<Frozen>>) -> f64 {
        let out = match rec {
            Some(r) => {
                let fq = fake_quantize_traced(v, p);
                r.push(Frozen { residual: fq.value - v, value: fq.value, clamped: fq.clamped });
                fq.value
            }
            None => {
                let f = self.nodes[*k];
                if f.clamped {
                    f.value
                } else {
                    v + f.residual
                }
            }
        };
        *k += 1;
        out
    }

    /// Loss and kink pattern.
    pub fn loss(&self, m: &CnnModel, x: &[f64], label: usize) -> (f64, Pattern) {
        self.eval(m, x, label, None)
    }

    fn eval(&self, m: &CnnModel, x: &[f64], label: usize, mut rec: Option<&mut Vec<Frozen>>) -> (f64, Pattern) {
        let mut k = 0;
        let mut pat = Vec::new();
        let mut cur: Vec<f64> = x.iter().map(|&v| self.node(v, &self.setup.input, &mut k, &mut rec)).collect();
        let mut len = m.shape.input_len;
        let n_conv = m.conv_layers.len();
        let n_layers = n_conv + m.fc_layers.len();
        for l in 0..n_layers {
            let p = if l < n_conv { &m.conv_layers[l] } else { &m.fc_layers[l - n_conv] };
            let wq: Vec<Vec<f64>> = p
                .weights
                .iter()
                .map(|row| row.iter().map(|&w| self.node(w, &self.setup.weights[l], &mut k, &mut rec)).collect())
                .collect();
            let out_p = self.setup.outputs[l];
            if l < n_conv {
                let cin = p.weights[0].len();
                let mut pre = vec![vec![0.0; len]; wq.len()];
                for (co, row) in wq.iter().enumerate() {
                    for t in 0..len {
                        let mut z = p.biases[co];
                        for ci in 0..cin {
                            z += row[ci] * cur[ci * len + t];
                        }
                        let u = self.node(z, &out_p, &mut k, &mut rec);
                        pat.push(u8::from(u > 0.0));
                        pre[co][t] = u.max(0.0);
                    }
                }
                let olen = len.div_ceil(2);
                let mut out = Vec::new();
                for row in &pre {
                    for i in 0..olen {
                        let a = row[2 * i];
                        let b = if 2 * i + 1 < len { row[2 * i + 1] } else { f64::NEG_INFINITY };
                        pat.push(u8::from(b > a));
                        out.push(a.max(b));
                    }
                }
                cur = out;
                len = olen;
            } else {
                let last = l + 1 == n_layers;
                let mut out = Vec::new();
                for (o, row) in wq.iter().enumerate() {
                    let z = p.biases[o] + row.iter().zip(&cur).map(|(a, b)| a * b).sum::<f64>();
                    let u = self.node(z, &out_p, &mut k, &mut rec);
                    if last {
                        out.push(u);
                    } else {
                        pat.push(u8::from(u > 0.0));
                        out.push(u.max(0.0));
                    }
                }
                cur = out;
            }
        }
        let max = cur.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = cur.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
        (lse - cur[label], pat)
    }
}

/// Tiny random model with ranges calibrated on `inputs` by a plain float pass.
pub fn calibrated_tiny(rng: &mut ChaCha8Rng) -> (CnnModel, Vec<Vec<f64>>) {
    let shape = random_shape(rng, 6, 3, 2, 2);
    let mut m = CnnModel::random(shape, rng).unwrap();
    for b in m.layers_mut().flat_map(|l| l.biases.iter_mut()) {
        *b = rng.random_range(-0.2..0.4);
    }
    let n = m.shape.input_size();
    let inputs: Vec<Vec<f64>> = (0..16).map(|_| (0..n).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
    let ranges = cnn_dataplane::train::calibrate(&m, &inputs, cnn_dataplane::Execution::Sequential).unwrap();
    m.ranges = Some(ranges);
    (m, inputs)
}

pub fn range_of(values: impl IntoIterator<Item = f64>) -> ValueRange {
    let mut r = ValueRange::new(0.0, 0.0);
    values.into_iter().for_each(|v| r.include(v));
    r
}

pub struct GradCheck {
    pub checked: usize,
    pub skipped: usize,
    pub worst_rel: f64,
}

/// Compare analytic QAT weight gradients with central differences of the
/// frozen surrogate for `models` random tiny models.
pub fn qat_gradient_check(rng: &mut ChaCha8Rng, models: usize, bits: u32) -> GradCheck {
    let mut out = GradCheck { checked: 0, skipped: 0, worst_rel: 0.0 };
    for _ in 0..models {
        let (m, inputs) = calibrated_tiny(rng);
        let x = &inputs[rng.random_range(0..inputs.len())];
        let label = rng.random_range(0..m.shape.output_width());
        let setup = QatSetup::new(&m, bits).unwrap();
        let (_, g) = cnn_dataplane::train::sample_gradient(&m, Some(&setup), x, label).unwrap();
        let sur = Surrogate::new(&m, bits, x);
        let (_, base_pat) = sur.loss(&m, x, label);
        for l in 0..m.shape.num_layers() {
            let h = 1e-3 * setup.weights[l].scale;
            let (rows, cols) = (g[l].weights.len(), g[l].weights[0].len());
            for o in 0..rows {
                for i in 0..cols {
                    let mut p = m.clone();
                    *weight_mut(&mut p, l, o, i) += h;
                    let (up, pu) = sur.loss(&p, x, label);
                    *weight_mut(&mut p, l, o, i) -= 2.0 * h;
                    let (down, pd) = sur.loss(&p, x, label);
                    if pu != base_pat || pd != base_pat {
                        out.skipped += 1;
                        continue;
                    }
                    let fd = (up - down) / (2.0 * h);
                    let an = g[l].weights[o][i];
                    let scale = an.abs().max(fd.abs());
                    let rel = if scale < 1e-9 { 0.0 } else { (fd - an).abs() / scale };
                    out.worst_rel = out.worst_rel.max(rel);
                    out.checked += 1;
                }
            }
        }
    }
    out
}

/// Calibrated and quantized random model on `shape`, plus inputs: half from
/// the calibration distribution, half uniform over the whole code range.
pub fn random_quantized(
    rng: &mut ChaCha8Rng,
    shape: ModelShape,
    bits: u32,
    inputs: usize,
) -> (cnn_dataplane::quant::QuantizedModel, Vec<Vec<i32>>) {
    let mut m = CnnModel::random(shape, rng).unwrap();
    for b in m.layers_mut().flat_map(|l| l.biases.iter_mut()) {
        *b = rng.random_range(-0.3..0.3);
    }
    let n = m.shape.input_size();
    let floats: Vec<Vec<f64>> = (0..16).map(|_| (0..n).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
    m.ranges = Some(cnn_dataplane::train::calibrate(&m, &floats, cnn_dataplane::Execution::Sequential).unwrap());
    let qm = cnn_dataplane::quant::quantize_model(&m, bits).unwrap();
    let p = *qm.input_params();
    let xs = (0..inputs)
        .map(|k| {
            if k % 2 == 0 {
                let x: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
                qm.quantize_input(&x)
            } else {
                (0..n).map(|_| rng.random_range(p.q_min..=p.q_max)).collect()
            }
        })
        .collect();
    (qm, xs)
}
