use serde::{Deserialize, Serialize};

use crate::model::{LayerKind, ModelShape};
use crate::quant::QuantizedModel;

/// One fused multiply/accumulate/activate/pool step over two input features.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapUnit {
    pub layer: usize,
    pub kind: LayerKind,
    /// Output position (conv); always 0 for FC.
    pub input_index: usize,
    /// Output channel (conv) or output feature (FC).
    pub channel: usize,
    /// Input channel (conv) or input pair (FC) being accumulated.
    pub acc: usize,
    /// Elements of the layer's input tensor read by the two products.
    pub inputs: [usize; 2],
    /// `(out, in)` weight of each product; `None` for the padding product of
    /// an odd FC input count.
    pub weights: [Option<(usize, usize)>; 2],
    pub apply_pool: bool,
    pub apply_sum: bool,
    /// Last accumulation step: quantize, activate, pool and store.
    pub is_last_channel: bool,
    /// Output element written when `is_last_channel`.
    pub output: usize,
}

/// `Σ C_in·C_out·ceil(T/2^n) + Σ T_out·ceil(T_in/2)`.
pub fn unit_count(shape: &ModelShape) -> usize {
    shape
        .layers()
        .iter()
        .map(|l| match l.kind {
            LayerKind::Conv => l.in_dim * l.out_dim * l.out_len,
            LayerKind::Fc => l.out_dim * l.in_dim.div_ceil(2),
        })
        .sum()
}

/// Units in execution order: layer, then input index, then output channel,
/// then accumulation step.
pub fn modularize_shape(shape: &ModelShape) -> Vec<CapUnit> {
    let mut units = Vec::with_capacity(unit_count(shape));
    for l in shape.layers() {
        match l.kind {
            LayerKind::Conv => {
                for i in 0..l.out_len {
                    for co in 0..l.out_dim {
                        for ci in 0..l.in_dim {
                            let a = ci * l.in_len + 2 * i;
                            let b = ci * l.in_len + (2 * i + 1).min(l.in_len - 1);
                            units.push(CapUnit {
                                layer: l.index,
                                kind: l.kind,
                                input_index: i,
                                channel: co,
                                acc: ci,
                                inputs: [a, b],
                                weights: [Some((co, ci)), Some((co, ci))],
                                apply_pool: true,
                                apply_sum: false,
                                is_last_channel: ci + 1 == l.in_dim,
                                output: co * l.out_len + i,
                            });
                        }
                    }
                }
            }
            LayerKind::Fc => {
                let pairs = l.in_dim.div_ceil(2);
                for o in 0..l.out_dim {
                    for k in 0..pairs {
                        let second = 2 * k + 1 < l.in_dim;
                        units.push(CapUnit {
                            layer: l.index,
                            kind: l.kind,
                            input_index: 0,
                            channel: o,
                            acc: k,
                            inputs: [2 * k, if second { 2 * k + 1 } else { 2 * k }],
                            weights: [Some((o, 2 * k)), second.then_some((o, 2 * k + 1))],
                            apply_pool: false,
                            apply_sum: true,
                            is_last_channel: k + 1 == pairs,
                            output: o,
                        });
                    }
                }
            }
        }
    }
    units
}

pub fn modularize(qm: &QuantizedModel) -> (Vec<CapUnit>, usize) {
    let units = modularize_shape(&qm.shape);
    let n = units.len();
    (units, n)
}

/// Worst-case recirculation bound `ceil((T + L_conv + L_fc) · C² / p)`.
pub fn recirculation_bound(shape: &ModelShape, p: usize) -> usize {
    let c = shape.max_width();
    let t = shape.input_len + shape.conv.len() + shape.fc.len();
    (t * c * c).div_ceil(p.max(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_enumerated_small_model() {
        let s = ModelShape::new(1, 4, &[2], &[2]).unwrap();
        let u = modularize_shape(&s);
        assert_eq!(unit_count(&s), 8);
        assert_eq!(u.len(), 8);
        let conv: Vec<_> = u[..4].iter().map(|u| (u.input_index, u.channel, u.acc, u.output)).collect();
        assert_eq!(conv, vec![(0, 0, 0, 0), (0, 1, 0, 2), (1, 0, 0, 1), (1, 1, 0, 3)]);
        assert_eq!(u[2].inputs, [2, 3]);
        let fc: Vec<_> = u[4..].iter().map(|u| (u.channel, u.acc, u.inputs, u.is_last_channel)).collect();
        assert_eq!(fc, vec![(0, 0, [0, 1], false), (0, 1, [2, 3], true), (1, 0, [0, 1], false), (1, 1, [2, 3], true)]);
    }

    #[test]
    fn minimal_model_has_one_unit() {
        let s = ModelShape::new(1, 2, &[1], &[]).unwrap();
        assert_eq!(unit_count(&s), 1);
        assert!(modularize_shape(&s)[0].is_last_channel);
    }

    #[test]
    fn odd_tails() {
        let s = ModelShape::new(1, 3, &[1], &[1]).unwrap();
        let u = modularize_shape(&s);
        assert_eq!(u[1].inputs, [2, 2]);
        let s = ModelShape::new(1, 3, &[], &[1]).unwrap();
        let u = modularize_shape(&s);
        assert_eq!(u[1].inputs, [2, 2]);
        assert_eq!(u[1].weights, [Some((0, 2)), None]);
    }

    #[test]
    fn bound_examples() {
        let s = ModelShape::new(1, 4, &[4], &[4]).unwrap();
        assert_eq!(s.max_width(), 8);
        let s = ModelShape::new(1, 4, &[2], &[4]).unwrap();
        // C = max(1, 2, 4, 4) = 4.
        assert_eq!(recirculation_bound(&s, 1), 96);
        assert_eq!(recirculation_bound(&s, 2), 48);
        assert_eq!(recirculation_bound(&s, 5), 20);
    }

    proptest! {
        #[test]
        fn formula_matches_enumeration(
            t in 1usize..20,
            convs in proptest::collection::vec(1usize..5, 0..3),
            fcs in proptest::collection::vec(1usize..6, 0..3),
        ) {
            prop_assume!(!convs.is_empty() || !fcs.is_empty());
            let s = ModelShape::new(1, t, &convs, &fcs).unwrap();
            let units = modularize_shape(&s);
            prop_assert_eq!(units.len(), unit_count(&s));
            prop_assert!(units.len() <= recirculation_bound(&s, 1));
            let lasts = units.iter().filter(|u| u.is_last_channel).count();
            let outputs: usize = s.layers().iter().map(|l| l.output_size()).sum();
            prop_assert_eq!(lasts, outputs);
        }
    }
}
