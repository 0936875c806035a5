use crate::error::{Error, Result};
use crate::model::{CnnModel, LayerKind, LayerParams};

use super::qat::{fake_quantize_traced, QatSetup};

/// Per-layer gradients, in the layout of [`LayerParams`].
pub type Gradient = Vec<LayerParams>;

pub fn zero_gradient(model: &CnnModel) -> Gradient {
    model.layers().map(|l| LayerParams::zeros(l.out_dim(), l.in_dim())).collect()
}

pub fn add_gradient(acc: &mut Gradient, g: &Gradient) {
    for (a, b) in acc.iter_mut().zip(g) {
        for (ra, rb) in a.weights.iter_mut().zip(&b.weights) {
            for (x, y) in ra.iter_mut().zip(rb) {
                *x += y;
            }
        }
        for (x, y) in a.biases.iter_mut().zip(&b.biases) {
            *x += y;
        }
    }
}

struct LayerCache {
    input: Vec<f64>,
    weights: Vec<Vec<f64>>,
    /// Pre-activation after the optional fake-quantize node.
    pre: Vec<f64>,
    /// STE mask of the pre-activation node.
    pass: Vec<bool>,
    /// For conv layers: which position won each pooling window.
    pool_src: Vec<usize>,
}

fn fq_weights(w: &[Vec<f64>], qat: Option<(&QatSetup, usize)>) -> Vec<Vec<f64>> {
    match qat {
        // Weight params span every weight, so these nodes never saturate.
        Some((s, l)) => {
            w.iter().map(|row| row.iter().map(|&v| fake_quantize_traced(v, &s.weights[l]).value).collect()).collect()
        }
        None => w.to_vec(),
    }
}

fn fq_pre(z: f64, qat: Option<(&QatSetup, usize)>) -> (f64, bool) {
    match qat {
        Some((s, l)) => {
            let r = fake_quantize_traced(z, &s.outputs[l]);
            (r.value, !r.clamped)
        }
        None => (z, true),
    }
}

/// Softmax cross-entropy loss and its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    let loss = sum.ln() + max - logits[label];
    let grad = exp.iter().enumerate().map(|(i, e)| e / sum - if i == label { 1.0 } else { 0.0 }).collect();
    (loss, grad)
}

/// Loss and parameter gradient of one sample.
///
/// With `qat` set, the input, every weight and every layer's pre-activation
/// pass through fake-quantize nodes and gradients use the saturated STE.
pub fn sample_gradient(model: &CnnModel, qat: Option<&QatSetup>, x: &[f64], label: usize) -> Result<(f64, Gradient)> {
    let shape = &model.shape;
    if x.len() != shape.input_size() {
        return Err(Error::Dimension(format!("sample has {} features, model expects {}", x.len(), shape.input_size())));
    }
    if label >= shape.output_width() {
        return Err(Error::Config(format!("label {label} outside {} classes", shape.output_width())));
    }
    let mut cur: Vec<f64> = match qat {
        Some(s) => x.iter().map(|&v| fake_quantize_traced(v, &s.input).value).collect(),
        None => x.to_vec(),
    };
    let specs = shape.layers();
    let mut caches = Vec::with_capacity(specs.len());
    for spec in &specs {
        let params = model.layer(spec.index);
        let q = qat.map(|s| (s, spec.index));
        let w = fq_weights(&params.weights, q);
        let (mut pre, mut pass) = (Vec::new(), Vec::new());
        let mut pool_src = Vec::new();
        let out = match spec.kind {
            LayerKind::Conv => {
                let len = spec.in_len;
                for co in 0..spec.out_dim {
                    for t in 0..len {
                        let mut z = params.biases[co];
                        for ci in 0..spec.in_dim {
                            z += w[co][ci] * cur[ci * len + t];
                        }
                        let (u, ok) = fq_pre(z, q);
                        pre.push(u);
                        pass.push(ok);
                    }
                }
                let mut out = Vec::with_capacity(spec.output_size());
                for co in 0..spec.out_dim {
                    for i in 0..spec.out_len {
                        let mut src = 2 * i;
                        for t in (2 * i + 1)..(2 * i + 2).min(len) {
                            if pre[co * len + t].max(0.0) > pre[co * len + src].max(0.0) {
                                src = t;
                            }
                        }
                        pool_src.push(src);
                        out.push(pre[co * len + src].max(0.0));
                    }
                }
                out
            }
            LayerKind::Fc => {
                for o in 0..spec.out_dim {
                    let mut z = params.biases[o];
                    for (wv, xv) in w[o].iter().zip(&cur) {
                        z += wv * xv;
                    }
                    let (u, ok) = fq_pre(z, q);
                    pre.push(u);
                    pass.push(ok);
                }
                if spec.relu() {
                    pre.iter().map(|&u| u.max(0.0)).collect()
                } else {
                    pre.clone()
                }
            }
        };
        caches.push(LayerCache { input: std::mem::replace(&mut cur, out), weights: w, pre, pass, pool_src });
    }

    let (loss, mut d_out) = cross_entropy(&cur, label);
    if !loss.is_finite() {
        return Err(Error::Diverged(format!("loss is {loss}")));
    }
    let mut grads = zero_gradient(model);
    for (spec, cache) in specs.iter().zip(&caches).rev() {
        let g = &mut grads[spec.index];
        // Gradient w.r.t. the (fake-quantized) pre-activation.
        let mut d_pre = vec![0.0; cache.pre.len()];
        match spec.kind {
            LayerKind::Conv => {
                for co in 0..spec.out_dim {
                    for i in 0..spec.out_len {
                        let k = co * spec.in_len + cache.pool_src[co * spec.out_len + i];
                        if cache.pre[k] > 0.0 {
                            d_pre[k] += d_out[co * spec.out_len + i];
                        }
                    }
                }
            }
            LayerKind::Fc => {
                for (o, d) in d_pre.iter_mut().enumerate() {
                    if !spec.relu() || cache.pre[o] > 0.0 {
                        *d = d_out[o];
                    }
                }
            }
        }
        for (d, &ok) in d_pre.iter_mut().zip(&cache.pass) {
            if !ok {
                *d = 0.0;
            }
        }
        let mut d_in = vec![0.0; cache.input.len()];
        match spec.kind {
            LayerKind::Conv => {
                let len = spec.in_len;
                for co in 0..spec.out_dim {
                    for t in 0..len {
                        let d = d_pre[co * len + t];
                        if d == 0.0 {
                            continue;
                        }
                        g.biases[co] += d;
                        for ci in 0..spec.in_dim {
                            g.weights[co][ci] += d * cache.input[ci * len + t];
                            d_in[ci * len + t] += d * cache.weights[co][ci];
                        }
                    }
                }
            }
            LayerKind::Fc => {
                for (o, &d) in d_pre.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    g.biases[o] += d;
                    for (i, &xv) in cache.input.iter().enumerate() {
                        g.weights[o][i] += d * xv;
                        d_in[i] += d * cache.weights[o][i];
                    }
                }
            }
        }
        d_out = d_in;
    }
    Ok((loss, grads))
}
