use super::{CnnModel, LayerKind};

/// FLOPs split by source. A multiply-accumulate counts as two FLOPs; each
/// bias add counts as one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FlopsBreakdown {
    pub conv_mac: u64,
    pub conv_bias: u64,
    pub fc_mac: u64,
    pub fc_bias: u64,
}

impl FlopsBreakdown {
    pub fn total(&self) -> u64 {
        self.conv_mac + self.conv_bias + self.fc_mac + self.fc_bias
    }

    pub fn of(model: &CnnModel) -> Self {
        let mut f = Self::default();
        for spec in model.shape.layers() {
            let (i, o) = (spec.in_dim as u64, spec.out_dim as u64);
            match spec.kind {
                LayerKind::Conv => {
                    let len = spec.in_len as u64;
                    f.conv_mac += 2 * i * o * len;
                    f.conv_bias += o * len;
                }
                LayerKind::Fc => {
                    f.fc_mac += 2 * i * o;
                    f.fc_bias += o;
                }
            }
        }
        f
    }
}

pub fn count_flops(model: &CnnModel) -> u64 {
    FlopsBreakdown::of(model).total()
}
