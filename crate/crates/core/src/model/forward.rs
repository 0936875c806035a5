use crate::error::{Error, Result};

use super::{CnnModel, LayerKind, Tensor1D};

/// Result of a float forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub output: Tensor1D,
    /// Every boundary tensor: the input, each layer's output (after ReLU and
    /// pooling), the final logits.
    pub activations: Vec<Tensor1D>,
}

impl Forward {
    pub fn class(&self) -> usize {
        argmax_index(&self.output.values).expect("forward output is never empty")
    }
}

pub fn forward(model: &CnnModel, input: &Tensor1D) -> Result<Forward> {
    let shape = &model.shape;
    if input.channels != shape.input_channels || input.length != shape.input_len {
        return Err(Error::Dimension(format!(
            "input is {}x{}, model expects {}x{}",
            input.channels, input.length, shape.input_channels, shape.input_len
        )));
    }
    let mut activations = Vec::with_capacity(shape.num_layers() + 1);
    activations.push(input.clone());
    let mut cur = input.clone();
    for spec in shape.layers() {
        let params = model.layer(spec.index);
        cur = match spec.kind {
            LayerKind::Conv => {
                let mut out = Tensor1D::zeros(spec.out_dim, spec.out_len);
                for co in 0..spec.out_dim {
                    let w = &params.weights[co];
                    for i in 0..spec.out_len {
                        let mut best = f64::NEG_INFINITY;
                        for t in (2 * i)..(2 * i + 2).min(spec.in_len) {
                            let mut z = params.biases[co];
                            for (ci, wv) in w.iter().enumerate() {
                                z += wv * cur.at(ci, t);
                            }
                            best = best.max(z.max(0.0));
                        }
                        out.set(co, i, best);
                    }
                }
                out
            }
            LayerKind::Fc => {
                let mut out = Tensor1D::zeros(spec.out_dim, 1);
                for (o, w) in params.weights.iter().enumerate() {
                    let mut z = params.biases[o];
                    for (x, wv) in cur.values.iter().zip(w) {
                        z += wv * x;
                    }
                    out.values[o] = if spec.relu() { z.max(0.0) } else { z };
                }
                out
            }
        };
        activations.push(cur.clone());
    }
    Ok(Forward { output: cur, activations })
}

/// Index of the maximum value, lowest index on ties.
pub fn argmax_index<T: PartialOrd + Copy>(values: &[T]) -> Option<usize> {
    let (mut best, mut best_v) = (0, *values.first()?);
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    Some(best)
}

pub fn argmax_class(output: &Tensor1D) -> Result<usize> {
    argmax_index(&output.values).ok_or(Error::EmptyOutput)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LayerParams, ModelShape};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn nested_loop_oracle(model: &CnnModel, x: &[Vec<f64>]) -> Vec<f64> {
        // Independent evaluator: explicit pre-activation, ReLU and pool
        // arrays, no shared helpers with the implementation.
        let mut chans: Vec<Vec<f64>> = x.to_vec();
        for l in &model.conv_layers {
            let len = chans[0].len();
            let mut z = vec![vec![0.0; len]; l.biases.len()];
            for co in 0..l.biases.len() {
                for t in 0..len {
                    let mut s = l.biases[co];
                    for ci in 0..chans.len() {
                        s += l.weights[co][ci] * chans[ci][t];
                    }
                    z[co][t] = if s > 0.0 { s } else { 0.0 };
                }
            }
            chans = z
                .iter()
                .map(|row| {
                    let mut p = Vec::new();
                    let mut t = 0;
                    while t < row.len() {
                        if t + 1 < row.len() {
                            p.push(if row[t + 1] > row[t] { row[t + 1] } else { row[t] });
                        } else {
                            p.push(row[t]);
                        }
                        t += 2;
                    }
                    p
                })
                .collect();
        }
        let mut flat: Vec<f64> = chans.concat();
        let n_fc = model.fc_layers.len();
        for (m, l) in model.fc_layers.iter().enumerate() {
            let mut out = Vec::new();
            for o in 0..l.biases.len() {
                let mut s = l.biases[o];
                for i in 0..flat.len() {
                    s += l.weights[o][i] * flat[i];
                }
                out.push(if m + 1 < n_fc && s < 0.0 { 0.0 } else { s });
            }
            flat = out;
        }
        flat
    }

    #[test]
    fn identity_weight_single_conv() {
        let shape = ModelShape::new(1, 4, &[1], &[]).unwrap();
        let mut m = CnnModel::zeros(shape).unwrap();
        m.conv_layers[0] = LayerParams { weights: vec![vec![1.0]], biases: vec![0.0] };
        let x = Tensor1D::new(1, 4, vec![3.0, -2.0, 5.0, 1.0]).unwrap();
        let f = forward(&m, &x).unwrap();
        assert_eq!(f.output.values, vec![3.0, 5.0]);
        assert_eq!(f.activations.len(), 2);
    }

    #[test]
    fn zero_weights_give_relu_of_bias() {
        let shape = ModelShape::new(1, 5, &[3], &[2]).unwrap();
        let mut m = CnnModel::zeros(shape).unwrap();
        m.conv_layers[0].biases = vec![0.5, -1.0, 2.0];
        m.fc_layers[0].biases = vec![-0.25, 0.75];
        let x = Tensor1D::new(1, 5, vec![9.0, -4.0, 1.0, 2.0, 7.0]).unwrap();
        let f = forward(&m, &x).unwrap();
        assert!(f.activations[1].values.chunks(3).all(|c| c.iter().all(|&v| v == c[0])));
        assert_eq!(f.activations[1].values, vec![0.5, 0.5, 0.5, 0.0, 0.0, 0.0, 2.0, 2.0, 2.0]);
        // final layer has no ReLU
        assert_eq!(f.output.values, vec![-0.25, 0.75]);
    }

    #[test]
    fn shape_mismatch_is_a_dimension_error() {
        let m = CnnModel::zeros(ModelShape::new(1, 4, &[1], &[]).unwrap()).unwrap();
        let x = Tensor1D::zeros(1, 5);
        assert!(matches!(forward(&m, &x), Err(Error::Dimension(_))));
    }

    #[test]
    fn argmax_ties_pick_lowest_index() {
        assert_eq!(argmax_class(&Tensor1D::new(2, 1, vec![0.1, 0.9]).unwrap()).unwrap(), 1);
        assert_eq!(argmax_class(&Tensor1D::new(2, 1, vec![0.5, 0.5]).unwrap()).unwrap(), 0);
        assert_eq!(argmax_index::<f64>(&[]), None);
    }

    #[test]
    fn random_models_match_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let c_in = rng.random_range(1..4);
            let t = rng.random_range(1..12);
            let convs: Vec<usize> = (0..rng.random_range(1..3)).map(|_| rng.random_range(1..5)).collect();
            let fcs: Vec<usize> = (0..rng.random_range(0..3)).map(|_| rng.random_range(1..5)).collect();
            let shape = ModelShape::new(c_in, t, &convs, &fcs).unwrap();
            let mut m = CnnModel::random(shape, &mut rng).unwrap();
            for b in m.layers_mut().flat_map(|l| l.biases.iter_mut()) {
                *b = rng.random_range(-0.5..0.5);
            }
            let rows: Vec<Vec<f64>> =
                (0..c_in).map(|_| (0..t).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
            let x = Tensor1D::new(c_in, t, rows.concat()).unwrap();
            let got = forward(&m, &x).unwrap().output.values;
            let want = nested_loop_oracle(&m, &rows);
            assert_eq!(got.len(), want.len());
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() <= 1e-12 * (1.0 + w.abs()), "{g} vs {w}");
            }
        }
    }

    proptest! {
        #[test]
        fn relu_outputs_nonnegative_and_deterministic(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = rng.random_range(1..20);
            let shape = ModelShape::new(1, t, &[3, 2], &[3, 2]).unwrap();
            let m = CnnModel::random(shape, &mut rng).unwrap();
            let x = Tensor1D::new(1, t, (0..t).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let a = forward(&m, &x).unwrap();
            let b = forward(&m, &x).unwrap();
            prop_assert_eq!(&a, &b);
            for act in &a.activations[1..a.activations.len() - 1] {
                prop_assert!(act.values.iter().all(|&v| v >= 0.0));
            }
            prop_assert_eq!(a.activations[1].length, t.div_ceil(2));
        }
    }
}
