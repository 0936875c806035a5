use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// Channel-major input features.
    pub features: Vec<f64>,
    pub label: usize,
}

/// Labeled feature vectors. On disk: CSV with columns `f0..f{n-1},label`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn inputs(&self) -> Vec<Vec<f64>> {
        self.samples.iter().map(|s| s.features.clone()).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Deterministic split: every `k`-th sample (k = round(1/test_fraction))
    /// goes to the test set.
    pub fn split(&self, test_fraction: f64) -> (Dataset, Dataset) {
        let k = (1.0 / test_fraction.clamp(1e-9, 1.0)).round().max(1.0) as usize;
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (i, s) in self.samples.iter().enumerate() {
            if i % k == k - 1 {
                test.push(s.clone());
            } else {
                train.push(s.clone());
            }
        }
        (Dataset { samples: train }, Dataset { samples: test })
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let n = self.samples.first().map_or(0, |s| s.features.len());
        let mut header: Vec<String> = (0..n).map(|i| format!("f{i}")).collect();
        header.push("label".into());
        out.write_record(&header)?;
        for s in &self.samples {
            let mut rec: Vec<String> = s.features.iter().map(|v| v.to_string()).collect();
            rec.push(s.label.to_string());
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut samples = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let line = i + 2;
            let rec = rec?;
            let parse_err = |msg: String| Error::Parse { line, msg };
            let (label, feats) = rec
                .iter()
                .collect::<Vec<_>>()
                .split_last()
                .map(|(l, f)| (l.to_string(), f.iter().map(|s| s.to_string()).collect::<Vec<_>>()))
                .ok_or_else(|| parse_err("empty record".into()))?;
            let label = label.trim().parse().map_err(|e| parse_err(format!("label: {e}")))?;
            let features = feats
                .iter()
                .map(|s| s.trim().parse::<f64>().map_err(|e| parse_err(format!("feature {s:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            if features.iter().any(|v| !v.is_finite()) {
                return Err(parse_err("non-finite feature".into()));
            }
            samples.push(Sample { features, label });
        }
        Ok(Self { samples })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let d = Dataset {
            samples: vec![
                Sample { features: vec![0.1, 1.0 / 3.0], label: 2 },
                Sample { features: vec![-5e-7, 4.0], label: 0 },
            ],
        };
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("f0,f1,label\n"));
        assert_eq!(Dataset::read_csv(buf.as_slice()).unwrap(), d);
    }

    #[test]
    fn parse_error_has_line_number() {
        let text = "f0,label\n0.5,1\nabc,0\n";
        match Dataset::read_csv(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let d = Dataset { samples: (0..10).map(|i| Sample { features: vec![i as f64], label: 0 }).collect() };
        let (tr, te) = d.split(0.2);
        assert_eq!((tr.len(), te.len()), (8, 2));
        assert_eq!(te.samples[0].features, vec![4.0]);
    }
}
