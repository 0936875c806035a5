use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-slot min-max normalization bounds, frozen from the training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Normalizer {
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut it = rows.into_iter();
        let first = it.next().ok_or_else(|| Error::Config("cannot fit normalizer on no data".into()))?;
        let (mut min, mut max) = (first.to_vec(), first.to_vec());
        for row in it {
            if row.len() != min.len() {
                return Err(Error::Dimension("ragged feature rows".into()));
            }
            for ((lo, hi), &v) in min.iter_mut().zip(max.iter_mut()).zip(row) {
                *lo = lo.min(v);
                *hi = hi.max(v);
            }
        }
        Ok(Self { min, max })
    }

    pub fn len(&self) -> usize {
        self.min.len()
    }

    pub fn is_empty(&self) -> bool {
        self.min.is_empty()
    }

    /// Maps slot `i` from `[min_i, max_i]` onto `[0, 1]`; constant slots map to 0.
    pub fn apply(&self, raw: &[f64]) -> Result<Vec<f64>> {
        if raw.len() != self.min.len() {
            return Err(Error::Dimension(format!("{} features, normalizer has {}", raw.len(), self.min.len())));
        }
        Ok(raw
            .iter()
            .zip(self.min.iter().zip(&self.max))
            .map(|(&v, (&lo, &hi))| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 })
            .collect())
    }
}
