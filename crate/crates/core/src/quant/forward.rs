use crate::error::{Error, Result};
use crate::model::{argmax_index, LayerKind};

use super::{QuantizedLayer, QuantizedModel};

/// Output of the integer reference pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantForward {
    pub class: usize,
    /// Stored output of every layer (after ReLU and pooling), channel-major.
    pub activations: Vec<Vec<i32>>,
}

impl QuantForward {
    pub fn logits(&self) -> &[i32] {
        self.activations.last().expect("at least one layer")
    }
}

fn mac(acc: i32, w_off: i32, x_off: i32, layer: usize) -> Result<i32> {
    w_off.checked_mul(x_off).and_then(|p| acc.checked_add(p)).ok_or(Error::AccumulatorOverflow { layer })
}

fn finish(l: &QuantizedLayer, acc: i32, bias: i32, layer: usize) -> Result<i32> {
    let acc = acc.checked_add(bias).ok_or(Error::AccumulatorOverflow { layer })?;
    let q = l.requant.apply(i64::from(acc));
    Ok(if l.relu { q.max(l.output.zero_point) } else { q })
}

/// Integer-only evaluation: 32-bit accumulation of `(q_w - Z_w)(q_x - Z_x)`,
/// bias add, fixed-point requantization, integer ReLU `max(q, Z_a)` and
/// integer max pooling.
pub fn quantized_forward(qm: &QuantizedModel, q_x: &[i32]) -> Result<QuantForward> {
    let input = qm.input_params();
    if q_x.len() != qm.shape.input_size() {
        return Err(Error::Dimension(format!("expected {} input codes, got {}", qm.shape.input_size(), q_x.len())));
    }
    if let Some(bad) = q_x.iter().find(|&&q| !input.contains(q)) {
        return Err(Error::Dimension(format!("input code {bad} outside [{}, {}]", input.q_min, input.q_max)));
    }
    let mut activations = Vec::with_capacity(qm.layers.len());
    let mut cur: Vec<i32> = q_x.to_vec();
    for (li, l) in qm.layers.iter().enumerate() {
        let zx = l.input.zero_point;
        let next = match l.kind {
            LayerKind::Conv => {
                let mut out = vec![0i32; l.out_dim * l.out_len];
                for co in 0..l.out_dim {
                    for i in 0..l.out_len {
                        let mut pooled = i32::MIN;
                        for t in (2 * i)..(2 * i + 2).min(l.in_len) {
                            let mut acc = 0i32;
                            for ci in 0..l.in_dim {
                                acc = mac(acc, l.weight_offset(co, ci), cur[ci * l.in_len + t] - zx, li)?;
                            }
                            pooled = pooled.max(finish(l, acc, l.biases[co], li)?);
                        }
                        out[co * l.out_len + i] = pooled;
                    }
                }
                out
            }
            LayerKind::Fc => (0..l.out_dim)
                .map(|o| {
                    let mut acc = 0i32;
                    for (i, &x) in cur.iter().enumerate() {
                        acc = mac(acc, l.weight_offset(o, i), x - zx, li)?;
                    }
                    finish(l, acc, l.biases[o], li)
                })
                .collect::<Result<_>>()?,
        };
        activations.push(next.clone());
        cur = next;
    }
    let class = argmax_index(&cur).ok_or(Error::EmptyOutput)?;
    Ok(QuantForward { class, activations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ActivationRanges, CnnModel, ModelShape, Tensor1D, ValueRange};
    use crate::quant::{compute_qrange, dequantize, quantize_model, QuantParams, Requantizer};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn p4(scale: f64, zero_point: i32) -> QuantParams {
        let (q_min, q_max) = compute_qrange(4, true).unwrap();
        QuantParams { scale, zero_point, bits: 4, signed: true, q_min, q_max }
    }

    /// One conv channel over two features, 4-bit codes, evaluated by hand.
    fn hand_model() -> QuantizedModel {
        let input = p4(0.5, -8);
        let weight = p4(0.25, 0);
        let output = p4(0.5, -8);
        // M = 0.25 * 0.5 / 0.5 = 0.25 -> M0 = 2^14, n = 16
        let requant = Requantizer::new(&weight, &input, &output).unwrap();
        assert_eq!((requant.m0, requant.shift), (1 << 14, 16));
        QuantizedModel {
            shape: ModelShape::new(1, 2, &[1], &[]).unwrap(),
            bits: 4,
            layers: vec![QuantizedLayer {
                kind: LayerKind::Conv,
                in_dim: 1,
                out_dim: 1,
                in_len: 2,
                out_len: 1,
                relu: true,
                input,
                weight,
                output,
                requant,
                weights: vec![vec![3]],
                biases: vec![2],
            }],
            normalizer: None,
        }
    }

    #[test]
    fn hand_computed_conv_channel() {
        let qm = hand_model();
        // x = [-3, 1]: offsets 5 and 9; acc = 3*5 + 2 = 17, 3*9 + 2 = 29
        // 17/4 = 4.25 -> 4, 29/4 = 7.25 -> 7; plus Z_a = -8 -> -4, -1
        // ReLU max(q, -8) keeps both; pool -> -1
        let out = quantized_forward(&qm, &[-3, 1]).unwrap();
        assert_eq!(out.activations, vec![vec![-1]]);
        assert_eq!(out.class, 0);
    }

    #[test]
    fn zero_offset_weights_leave_only_bias_path() {
        let mut qm = hand_model();
        qm.layers[0].weights = vec![vec![qm.layers[0].weight.zero_point]];
        qm.layers[0].biases = vec![40];
        let l = &qm.layers[0];
        let want = l.requant.apply(40).max(l.output.zero_point);
        for x in [-8, -1, 0, 7] {
            assert_eq!(quantized_forward(&qm, &[x, x]).unwrap().activations[0][0], want);
        }
    }

    #[test]
    fn input_out_of_range_rejected() {
        let qm = hand_model();
        assert!(quantized_forward(&qm, &[8, 0]).is_err());
        assert!(quantized_forward(&qm, &[0]).is_err());
    }

    #[test]
    fn accumulator_overflow_detected() {
        let mut qm = hand_model();
        qm.layers[0].biases = vec![i32::MAX];
        assert!(matches!(quantized_forward(&qm, &[7, 7]), Err(Error::AccumulatorOverflow { layer: 0 })));
    }

    fn random_calibrated(rng: &mut ChaCha8Rng, conv_layers: usize, fc_layers: usize) -> (CnnModel, Vec<Tensor1D>) {
        let t = rng.random_range(2..10);
        let convs: Vec<usize> = (0..conv_layers).map(|_| rng.random_range(1..4)).collect();
        let fcs: Vec<usize> = (0..fc_layers).map(|_| rng.random_range(2..5)).collect();
        let shape = ModelShape::new(1, t, &convs, &fcs).unwrap();
        let mut m = CnnModel::random(shape, rng).unwrap();
        let inputs: Vec<Tensor1D> = (0..64)
            .map(|_| Tensor1D::new(1, t, (0..t).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap())
            .collect();
        let mut ranges: Option<Vec<ValueRange>> = None;
        for x in &inputs {
            let f = crate::model::forward(&m, x).unwrap();
            let r = ranges.get_or_insert_with(|| vec![ValueRange::new(0.0, 0.0); f.activations.len()]);
            for (rr, a) in r.iter_mut().zip(&f.activations) {
                a.values.iter().for_each(|&v| rr.include(v));
            }
        }
        m.ranges = Some(ActivationRanges::from_boundaries(&ranges.unwrap()));
        (m, inputs)
    }

    /// Per-layer error check against an analytic bound.
    ///
    /// Given the measured input error `|x_hat - x|` of a layer, its output
    /// error is at most
    /// `sum |w| |dx| + sum |x_hat| S_w/2 + S_w S_x / 2 + S_a/2 + |acc| |M0 2^-n - M| S_a`
    /// plus whatever the float value sits outside the representable range.
    /// ReLU, clamp and max pooling are 1-Lipschitz and do not enlarge it.
    #[test]
    fn every_layer_error_within_analytic_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..60 {
            let (cl, fl) = (rng.random_range(1..3), rng.random_range(1..3));
            let (m, inputs) = random_calibrated(&mut rng, cl, fl);
            let bits = rng.random_range(4..=8);
            let qm = quantize_model(&m, bits).unwrap();
            for x in &inputs {
                let qx = qm.quantize_input(&x.values);
                let q = quantized_forward(&qm, &qx).unwrap();
                let f = crate::model::forward(&m, x).unwrap();
                let mut x_hat: Vec<f64> = qx.iter().map(|&v| dequantize(v, qm.input_params())).collect();
                for (li, l) in qm.layers.iter().enumerate() {
                    let fl_in = &f.activations[li].values;
                    let fl_out = &f.activations[li + 1].values;
                    let params = m.layer(li);
                    let (sw, sx, sa) = (l.weight.scale, l.input.scale, l.output.scale);
                    let m_err =
                        (f64::from(l.requant.m0) / 2f64.powi(l.requant.shift as i32) - l.requant.multiplier).abs();
                    let rep_lo = sa * f64::from(l.output.q_min - l.output.zero_point);
                    let rep_hi = sa * f64::from(l.output.q_max - l.output.zero_point);
                    let elem_bound = |w: &[f64], xs: &[(f64, f64)], b: f64| -> (f64, f64) {
                        // returns (bound, float pre-activation)
                        let mut bound = sw * sx / 2.0 + sa / 2.0;
                        let mut z = b;
                        let mut acc = b / (sw * sx);
                        for (wv, &(xf, xh)) in w.iter().zip(xs) {
                            bound += wv.abs() * (xh - xf).abs() + xh.abs() * sw / 2.0;
                            z += wv * xf;
                            acc += (wv / sw).round() * (xh / sx);
                        }
                        bound += (acc.abs() + 1.0) * m_err * sa;
                        bound += (z - z.clamp(rep_lo, rep_hi)).abs();
                        (bound, z)
                    };
                    let out_q = &q.activations[li];
                    for (o, (&qv, &fv)) in out_q.iter().zip(fl_out).enumerate() {
                        let bound = match l.kind {
                            LayerKind::Conv => {
                                let (co, i) = (o / l.out_len, o % l.out_len);
                                (2 * i..(2 * i + 2).min(l.in_len))
                                    .map(|t| {
                                        let xs: Vec<(f64, f64)> = (0..l.in_dim)
                                            .map(|ci| (fl_in[ci * l.in_len + t], x_hat[ci * l.in_len + t]))
                                            .collect();
                                        elem_bound(&params.weights[co], &xs, params.biases[co]).0
                                    })
                                    .fold(0.0, f64::max)
                            }
                            LayerKind::Fc => {
                                let xs: Vec<(f64, f64)> = fl_in.iter().copied().zip(x_hat.iter().copied()).collect();
                                elem_bound(&params.weights[o], &xs, params.biases[o]).0
                            }
                        };
                        let err = (dequantize(qv, &l.output) - fv).abs();
                        assert!(err <= bound + 1e-9, "layer {li} elem {o}: err {err} > bound {bound}");
                        assert!(l.output.contains(qv));
                    }
                    x_hat = out_q.iter().map(|&v| dequantize(v, &l.output)).collect();
                }
                assert_eq!(q, quantized_forward(&qm, &qx).unwrap());
            }
        }
    }
}
