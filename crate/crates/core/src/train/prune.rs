use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{count_flops, CnnModel, LayerKind, LayerParams, ModelShape};
use crate::quant::round_half_away;

/// Channels kept in one pruned layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunedLayer {
    pub layer: usize,
    pub original: usize,
    /// Ascending original indices.
    pub kept: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub rate: f64,
    /// Every conv layer and every hidden FC layer; the logit layer is never pruned.
    pub layers: Vec<PrunedLayer>,
    pub flops_before: u64,
    pub flops_after: u64,
}

impl PruneReport {
    pub fn flops_reduction(&self) -> f64 {
        1.0 - self.flops_after as f64 / self.flops_before as f64
    }
}

pub fn kept_count(rate: f64, channels: usize) -> usize {
    (round_half_away((1.0 - rate) * channels as f64) as usize).clamp(1, channels)
}

/// L1 norm of the weights consuming each output channel of layer `l`, taken
/// from the unpruned consumer. The first FC after the convs reads a channel
/// as `len` consecutive columns.
fn outgoing_l1(model: &CnnModel, l: usize) -> Vec<f64> {
    let specs = model.shape.layers();
    let next = model.layer(l + 1);
    let width =
        if specs[l].kind == LayerKind::Conv && specs[l + 1].kind == LayerKind::Fc { specs[l].out_len } else { 1 };
    (0..specs[l].out_dim)
        .map(|c| next.weights.iter().flat_map(|row| &row[c * width..(c + 1) * width]).map(|w| w.abs()).sum())
        .collect()
}

/// Indices of the `keep` highest scores, ascending.
fn select(scores: &[f64], keep: usize) -> Vec<usize> {
    let mut order: Vec<(f64, usize)> = scores.iter().copied().enumerate().map(|(c, s)| (s, c)).collect();
    // Stable sort by descending norm keeps the lower index first on ties.
    order.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut kept: Vec<usize> = order[..keep].iter().map(|&(_, c)| c).collect();
    kept.sort_unstable();
    kept
}

/// Remove the least important output channels (conv) and hidden neurons (FC).
///
/// Importance is the L1 norm of a channel's outgoing weights. Consumers of
/// a pruned tensor lose the matching input columns. Recorded ranges are
/// dropped since they no longer describe the network.
pub fn prune_channels(model: &CnnModel, rate: f64) -> Result<(CnnModel, PruneReport)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidRate(rate));
    }
    model.validate()?;
    let specs = model.shape.layers();
    let mut layers: Vec<LayerParams> = model.layers().cloned().collect();
    let mut report = Vec::new();
    // Input columns surviving in the current layer, as original indices.
    let mut in_keep: Vec<usize> = (0..model.shape.input_channels).collect();
    for spec in &specs {
        let params = &layers[spec.index];
        let out_keep: Vec<usize> = if spec.is_last {
            (0..spec.out_dim).collect()
        } else {
            let k = select(&outgoing_l1(model, spec.index), kept_count(rate, spec.out_dim));
            report.push(PrunedLayer { layer: spec.index, original: spec.out_dim, kept: k.clone() });
            k
        };
        // The first FC after convs sees channel-major flattened features.
        let cols: Vec<usize> = if spec.kind == LayerKind::Fc && spec.index == model.shape.conv.len() && spec.index > 0 {
            let len = specs[spec.index - 1].out_len;
            in_keep.iter().flat_map(|&c| (c * len)..(c * len + len)).collect()
        } else {
            in_keep.clone()
        };
        let pruned = LayerParams {
            weights: out_keep.iter().map(|&o| cols.iter().map(|&i| params.weights[o][i]).collect()).collect(),
            biases: out_keep.iter().map(|&o| params.biases[o]).collect(),
        };
        layers[spec.index] = pruned;
        in_keep = out_keep;
    }

    let widths = |kind: LayerKind| -> Vec<usize> {
        specs.iter().filter(|s| s.kind == kind).map(|s| layers[s.index].out_dim()).collect()
    };
    let shape = ModelShape::new(
        model.shape.input_channels,
        model.shape.input_len,
        &widths(LayerKind::Conv),
        &widths(LayerKind::Fc),
    )?;
    let n_conv = shape.conv.len();
    let fc_layers = layers.split_off(n_conv);
    let pruned = CnnModel { shape, conv_layers: layers, fc_layers, ranges: None, normalizer: model.normalizer.clone() };
    pruned.validate()?;
    let report =
        PruneReport { rate, layers: report, flops_before: count_flops(model), flops_after: count_flops(&pruned) };
    Ok((pruned, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, Tensor1D};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rate_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = CnnModel::random(ModelShape::new(1, 8, &[4, 3], &[5, 2]).unwrap(), &mut rng).unwrap();
        let (p, r) = prune_channels(&m, 0.0).unwrap();
        assert_eq!(p.shape, m.shape);
        assert_eq!(p.conv_layers, m.conv_layers);
        assert_eq!(p.fc_layers, m.fc_layers);
        assert_eq!(r.flops_before, r.flops_after);
        assert!(r.layers.iter().all(|l| l.kept == (0..l.original).collect::<Vec<_>>()));
    }

    #[test]
    fn zero_channel_pruned_first() {
        // Channel 0 feeds FC columns 0..2, channel 1 columns 2..4.
        let mut m = CnnModel::zeros(ModelShape::new(1, 4, &[2], &[2]).unwrap()).unwrap();
        m.conv_layers[0].weights = vec![vec![0.9], vec![0.7]];
        m.fc_layers[0].weights = vec![vec![0.0, 0.0, 0.5, -0.1], vec![0.0, 0.0, 0.2, 0.3]];
        let (p, r) = prune_channels(&m, 0.5).unwrap();
        assert_eq!(r.layers[0].kept, vec![1]);
        assert_eq!(p.conv_layers[0].weights, vec![vec![0.7]]);
        assert_eq!(p.shape.fc[0], (2, 2));
        assert_eq!(p.fc_layers[0].weights, vec![vec![0.5, -0.1], vec![0.2, 0.3]]);
    }

    #[test]
    fn ties_keep_lower_index() {
        let mut m = CnnModel::zeros(ModelShape::new(1, 2, &[3], &[1]).unwrap()).unwrap();
        m.fc_layers[0].weights = vec![vec![1.0, -1.0, 1.0]];
        let (_, r) = prune_channels(&m, 0.5).unwrap();
        assert_eq!(r.layers[0].kept, vec![0, 1]);
    }

    #[test]
    fn conv_to_conv_and_fc_to_fc_scores() {
        let mut m = CnnModel::zeros(ModelShape::new(1, 4, &[2, 1], &[3, 1]).unwrap()).unwrap();
        // conv2 reads conv1 channel 1 harder; fc2 reads hidden neuron 2.
        m.conv_layers[1].weights = vec![vec![0.1, -0.4]];
        m.fc_layers[1].weights = vec![vec![0.2, 0.1, -0.9]];
        assert_eq!(outgoing_l1(&m, 0), vec![0.1, 0.4]);
        assert_eq!(outgoing_l1(&m, 2), vec![0.2, 0.1, 0.9]);
        let (_, r) = prune_channels(&m, 0.5).unwrap();
        assert_eq!(r.layers[0].kept, vec![1]);
        assert_eq!(r.layers[2].kept, vec![0, 2]);
    }

    #[test]
    fn invalid_rate() {
        let m = CnnModel::zeros(ModelShape::new(1, 2, &[1], &[1]).unwrap()).unwrap();
        assert!(matches!(prune_channels(&m, 1.0), Err(Error::InvalidRate(_))));
        assert!(matches!(prune_channels(&m, -0.1), Err(Error::InvalidRate(_))));
    }

    #[test]
    fn kept_counts_follow_rounding_rule() {
        assert_eq!(kept_count(0.8, 16), 3);
        assert_eq!(kept_count(0.5, 15), 8);
        assert_eq!(kept_count(0.99, 4), 1);
        assert_eq!(kept_count(0.0, 7), 7);
    }

    /// Delete channels by hand from a copy and compare forward passes.
    fn hand_deleted(m: &CnnModel, report: &PruneReport) -> CnnModel {
        let mut conv = Vec::new();
        let mut fc = Vec::new();
        let mut prev: Option<Vec<usize>> = None;
        let n_conv = m.conv_layers.len();
        for l in 0..m.shape.num_layers() {
            let src = m.layer(l);
            let rows: Vec<usize> = report
                .layers
                .iter()
                .find(|p| p.layer == l)
                .map(|p| p.kept.clone())
                .unwrap_or_else(|| (0..src.out_dim()).collect());
            let mut w = Vec::new();
            let mut b = Vec::new();
            for &o in &rows {
                let mut row = Vec::new();
                for (i, &v) in src.weights[o].iter().enumerate() {
                    let keep = match &prev {
                        None => true,
                        Some(kept) if l == n_conv && n_conv > 0 => {
                            let len = m.shape.layers()[l - 1].out_len;
                            kept.contains(&(i / len))
                        }
                        Some(kept) => kept.contains(&i),
                    };
                    if keep {
                        row.push(v);
                    }
                }
                w.push(row);
                b.push(src.biases[o]);
            }
            let p = LayerParams { weights: w, biases: b };
            if l < n_conv {
                conv.push(p);
            } else {
                fc.push(p);
            }
            prev = Some(rows);
        }
        let shape = ModelShape::new(
            1,
            m.shape.input_len,
            &conv.iter().map(|l| l.out_dim()).collect::<Vec<_>>(),
            &fc.iter().map(|l| l.out_dim()).collect::<Vec<_>>(),
        )
        .unwrap();
        CnnModel { shape, conv_layers: conv, fc_layers: fc, ranges: None, normalizer: None }
    }

    #[test]
    fn pruned_forward_equals_hand_deleted_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..30 {
            let conv: Vec<usize> = (0..rng.random_range(1..4)).map(|_| rng.random_range(1..7)).collect();
            let fc: Vec<usize> = (0..rng.random_range(1..3)).map(|_| rng.random_range(1..7)).collect();
            let t = rng.random_range(2..12);
            let mut m = CnnModel::random(ModelShape::new(1, t, &conv, &fc).unwrap(), &mut rng).unwrap();
            for b in m.layers_mut().flat_map(|l| l.biases.iter_mut()) {
                *b = rng.random_range(-0.5..0.5);
            }
            let rate = rng.random_range(0.0..0.95);
            let (p, r) = prune_channels(&m, rate).unwrap();
            let oracle = hand_deleted(&m, &r);
            assert_eq!(p.shape, oracle.shape);
            for l in &r.layers {
                assert_eq!(l.kept.len(), kept_count(rate, l.original));
            }
            for _ in 0..5 {
                let x = Tensor1D::new(1, t, (0..t).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
                assert_eq!(forward(&p, &x).unwrap(), forward(&oracle, &x).unwrap());
            }
            let multi = m.shape.conv.iter().chain(&m.shape.fc[..m.shape.fc.len() - 1]).any(|&(_, o)| o >= 2);
            if rate > 0.0 && multi && r.layers.iter().any(|l| l.kept.len() < l.original) {
                assert!(r.flops_after < r.flops_before);
            }
        }
    }

    #[test]
    fn reference_shape_reduction_at_point_eight() {
        let m = CnnModel::zeros(ModelShape::reference(16)).unwrap();
        let (_, r) = prune_channels(&m, 0.8).unwrap();
        let red = r.flops_reduction();
        assert!((0.90..=0.96).contains(&red), "{red}");
    }
}
