use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `ceil(t / 2^n)`: sequence length after `n` window-2 pools.
pub fn ceil_div_pow2(t: usize, n: usize) -> usize {
    if n >= usize::BITS as usize {
        return usize::from(t > 0);
    }
    t.div_ceil(1usize << n)
}

/// Layer dimensions of a 1D-CNN.
///
/// `conv[n] = (C_in, C_out)` and `fc[m] = (T_in, T_out)`. Conv layer `n`
/// (0-based) reads a sequence of length `ceil(T / 2^n)` and emits one of
/// length `ceil(T / 2^(n+1))`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelShape {
    pub input_channels: usize,
    pub input_len: usize,
    pub conv: Vec<(usize, usize)>,
    pub fc: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    Fc,
}

/// One layer in execution order with its input/output geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    /// Index over all layers.
    pub index: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    /// Sequence length of the input (1 for FC).
    pub in_len: usize,
    /// Sequence length of the output (1 for FC).
    pub out_len: usize,
    pub is_last: bool,
}

impl LayerSpec {
    pub fn input_size(&self) -> usize {
        self.in_dim * self.in_len
    }

    pub fn output_size(&self) -> usize {
        self.out_dim * self.out_len
    }

    /// ReLU follows every conv layer and every FC layer but the final one.
    pub fn relu(&self) -> bool {
        self.kind == LayerKind::Conv || !self.is_last
    }
}

impl ModelShape {
    /// Chains layer widths: `conv_out[n]` output channels per conv layer,
    /// `fc_out[m]` output features per FC layer.
    pub fn new(input_channels: usize, input_len: usize, conv_out: &[usize], fc_out: &[usize]) -> Result<Self> {
        let mut conv = Vec::with_capacity(conv_out.len());
        let mut c = input_channels;
        for &o in conv_out {
            conv.push((c, o));
            c = o;
        }
        let mut t = c * ceil_div_pow2(input_len, conv_out.len());
        let mut fc = Vec::with_capacity(fc_out.len());
        for &o in fc_out {
            fc.push((t, o));
            t = o;
        }
        let shape = Self { input_channels, input_len, conv, fc };
        shape.validate()?;
        Ok(shape)
    }

    /// Three 16-channel conv layers and FC layers of 16 and 15 features.
    pub fn reference(input_len: usize) -> Self {
        Self::new(1, input_len, &[16, 16, 16], &[16, 15]).expect("reference shape is valid")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Shape(m));
        if self.input_channels == 0 || self.input_len == 0 {
            return bad("input channels and length must be >= 1".into());
        }
        if self.conv.is_empty() && self.fc.is_empty() {
            return bad("model needs at least one layer".into());
        }
        let mut c = self.input_channels;
        for (n, &(i, o)) in self.conv.iter().enumerate() {
            if i != c {
                return bad(format!("conv layer {} expects {i} input channels, previous layer gives {c}", n + 1));
            }
            if o == 0 {
                return bad(format!("conv layer {} has zero output channels", n + 1));
            }
            c = o;
        }
        let mut t = c * ceil_div_pow2(self.input_len, self.conv.len());
        for (m, &(i, o)) in self.fc.iter().enumerate() {
            if i != t {
                return bad(format!("fc layer {} expects {i} inputs, previous layer gives {t}", m + 1));
            }
            if o == 0 {
                return bad(format!("fc layer {} has zero outputs", m + 1));
            }
            t = o;
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.conv.len() + self.fc.len()
    }

    pub fn input_size(&self) -> usize {
        self.input_channels * self.input_len
    }

    /// Number of values produced by the last layer.
    pub fn output_width(&self) -> usize {
        self.layers().last().map_or(0, |l| l.output_size())
    }

    /// Largest channel or feature count over all layers.
    pub fn max_width(&self) -> usize {
        self.conv.iter().chain(&self.fc).flat_map(|&(i, o)| [i, o]).max().unwrap_or(0)
    }

    pub fn layers(&self) -> Vec<LayerSpec> {
        let total = self.num_layers();
        let mut out = Vec::with_capacity(total);
        for (n, &(i, o)) in self.conv.iter().enumerate() {
            out.push(LayerSpec {
                kind: LayerKind::Conv,
                index: n,
                in_dim: i,
                out_dim: o,
                in_len: ceil_div_pow2(self.input_len, n),
                out_len: ceil_div_pow2(self.input_len, n + 1),
                is_last: n + 1 == total,
            });
        }
        for (m, &(i, o)) in self.fc.iter().enumerate() {
            let index = self.conv.len() + m;
            out.push(LayerSpec {
                kind: LayerKind::Fc,
                index,
                in_dim: i,
                out_dim: o,
                in_len: 1,
                out_len: 1,
                is_last: index + 1 == total,
            });
        }
        out
    }

    /// Element counts of every boundary tensor (x, a1, .., y).
    pub fn boundary_sizes(&self) -> Vec<usize> {
        let mut v = vec![self.input_size()];
        v.extend(self.layers().iter().map(LayerSpec::output_size));
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reference_shape_dimensions() {
        let s = ModelShape::reference(16);
        assert_eq!(s.conv, vec![(1, 16), (16, 16), (16, 16)]);
        assert_eq!(s.fc, vec![(32, 16), (16, 15)]);
        assert_eq!(s.output_width(), 15);
        assert_eq!(s.max_width(), 32);
    }

    #[test]
    fn odd_lengths_use_ceiling() {
        let s = ModelShape::new(2, 7, &[3, 3], &[2]).unwrap();
        let l = s.layers();
        assert_eq!((l[0].in_len, l[0].out_len), (7, 4));
        assert_eq!((l[1].in_len, l[1].out_len), (4, 2));
        assert_eq!(s.fc[0], (6, 2));
    }

    #[test]
    fn rejects_broken_chains() {
        let mut s = ModelShape::new(1, 4, &[2], &[2]).unwrap();
        s.fc[0].0 = 3;
        assert!(s.validate().is_err());
        assert!(ModelShape::new(1, 4, &[], &[]).is_err());
        assert!(ModelShape::new(0, 4, &[1], &[]).is_err());
        assert!(ModelShape::new(1, 4, &[0], &[]).is_err());
    }

    #[test]
    fn conv_only_model_output_is_flattened_conv() {
        let s = ModelShape::new(1, 2, &[1], &[]).unwrap();
        assert_eq!(s.output_width(), 1);
        assert!(s.layers()[0].relu());
    }

    proptest! {
        #[test]
        fn first_fc_input_matches_conv_output(
            c_in in 1usize..4, t in 1usize..40,
            convs in proptest::collection::vec(1usize..6, 0..4),
            fcs in proptest::collection::vec(1usize..6, 1..3),
        ) {
            let s = ModelShape::new(c_in, t, &convs, &fcs).unwrap();
            let last_c = convs.last().copied().unwrap_or(c_in);
            prop_assert_eq!(s.fc[0].0, last_c * ceil_div_pow2(t, convs.len()));
            for (n, l) in s.layers().iter().take(convs.len()).enumerate() {
                prop_assert_eq!(l.out_len, ceil_div_pow2(t, n + 1));
                prop_assert_eq!(l.out_len, l.in_len.div_ceil(2));
            }
        }
    }
}
