use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::program::PipelineProgram;
use crate::quant::{quantized_forward, QuantizedModel};
use crate::sim::Simulator;
use crate::train::{Dataset, Sample};

use super::features::Normalizer;
use super::packet::{FlowKey, PacketRecord};
use super::table::{featurize, Action, FlowConfig, FlowTable};

/// One raw feature vector per labelled collection episode, in trigger order.
pub fn extract_dataset(packets: &[PacketRecord], labels: &[(FlowKey, usize)], cfg: &FlowConfig) -> Result<Dataset> {
    let labels: HashMap<FlowKey, usize> = labels.iter().copied().collect();
    let mut table = FlowTable::new(*cfg)?;
    let mut samples = Vec::new();
    for p in packets {
        if let Action::InferenceTriggered(features) = table.ingest(p) {
            if let Some(&label) = labels.get(&p.key) {
                samples.push(Sample { features, label });
                table.resolve(&p.key, label);
            }
        }
    }
    Ok(Dataset { samples })
}

/// Apply frozen normalization bounds to every sample.
pub fn normalize_dataset(data: &Dataset, norm: &Normalizer) -> Result<Dataset> {
    let samples = data
        .samples
        .iter()
        .map(|s| Ok(Sample { features: norm.apply(&s.features)?, label: s.label }))
        .collect::<Result<_>>()?;
    Ok(Dataset { samples })
}

/// Confusion matrix and derived scores. Rows are true classes, columns
/// predictions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub confusion: Vec<Vec<usize>>,
    pub accuracy: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    /// Mean F1 over classes that occur as truth or prediction.
    pub macro_f1: f64,
}

impl Metrics {
    pub fn from_pairs(pairs: &[(usize, usize)], classes: usize) -> Self {
        let k = pairs.iter().map(|&(t, p)| t.max(p) + 1).max().unwrap_or(0).max(classes);
        let mut confusion = vec![vec![0; k]; k];
        for &(t, p) in pairs {
            confusion[t][p] += 1;
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
        let mut precision = Vec::with_capacity(k);
        let mut recall = Vec::with_capacity(k);
        let mut f1 = Vec::with_capacity(k);
        let mut active = 0;
        for c in 0..k {
            let predicted: usize = (0..k).map(|t| confusion[t][c]).sum();
            let actual: usize = confusion[c].iter().sum();
            let (p, r) = (ratio(confusion[c][c], predicted), ratio(confusion[c][c], actual));
            precision.push(p);
            recall.push(r);
            f1.push(if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 });
            active += usize::from(predicted + actual > 0);
        }
        let macro_f1 = if active == 0 { 0.0 } else { f1.iter().sum::<f64>() / active as f64 };
        Self { accuracy: ratio(correct, pairs.len()), confusion, precision, recall, f1, macro_f1 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FlowResult {
    pub key: FlowKey,
    /// Trace index of the packet that triggered inference.
    pub packet: usize,
    pub class: usize,
    pub passes: usize,
    /// Class from the integer reference pass, when checked.
    pub oracle_class: Option<usize>,
    /// Whether every stored activation matched the reference.
    pub exact: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Classification {
    pub results: Vec<FlowResult>,
    pub packets: usize,
    pub forwarded: usize,
    pub cached: usize,
    pub inferences: usize,
    pub evictions: usize,
    /// Labelled flows classified; the first result of each flow counts.
    pub labelled: usize,
    pub oracle_mismatches: usize,
    pub metrics: Option<Metrics>,
}

#[derive(Default)]
struct ShardOut {
    results: Vec<FlowResult>,
    forwarded: usize,
    cached: usize,
    evictions: usize,
}

/// Replay a trace through the flow table, running the pipeline simulator
/// on every trigger. With `oracle`, each inference is also checked against
/// the integer reference pass.
///
/// Shards are independent and may run in parallel; results are merged in
/// trace order, so the output does not depend on `exec`.
pub fn classify_trace(
    packets: &[PacketRecord],
    labels: &[(FlowKey, usize)],
    prog: &PipelineProgram,
    oracle: Option<&QuantizedModel>,
    cfg: &FlowConfig,
    exec: Execution,
) -> Result<Classification> {
    cfg.validate()?;
    let n_in = prog.input.channels * prog.input.length;
    if cfg.feature_len() != n_in {
        return Err(Error::Dimension(format!(
            "flow profile yields {} features, program takes {n_in}",
            cfg.feature_len()
        )));
    }
    let norm = prog.input.normalizer.as_ref().ok_or(Error::MissingNormalizer)?;
    let sim = Simulator::new(prog)?;
    let shard_cfg = FlowConfig { shards: 1, capacity: cfg.capacity.div_ceil(cfg.shards), ..*cfg };
    let mut parts: Vec<Vec<usize>> = vec![Vec::new(); cfg.shards];
    for (i, p) in packets.iter().enumerate() {
        parts[(p.key.stable_hash() % cfg.shards as u64) as usize].push(i);
    }
    let outs = exec.try_map(&parts, |idx| -> Result<ShardOut> {
        let mut table = FlowTable::new(shard_cfg)?;
        let mut out = ShardOut::default();
        for &i in idx {
            let p = &packets[i];
            match table.ingest(p) {
                Action::Forwarded => out.forwarded += 1,
                Action::Predicted(_) => out.cached += 1,
                Action::InferenceTriggered(raw) => {
                    let q = featurize(&raw, Some(norm), &prog.input.params)?;
                    let run = sim.run(&q, false)?;
                    let (oracle_class, exact) = match oracle {
                        Some(qm) => {
                            let want = quantized_forward(qm, &q)?;
                            (Some(want.class), Some(want.activations == run.activations && want.class == run.class))
                        }
                        None => (None, None),
                    };
                    table.resolve(&p.key, run.class);
                    out.results.push(FlowResult {
                        key: p.key,
                        packet: i,
                        class: run.class,
                        passes: run.passes,
                        oracle_class,
                        exact,
                    });
                }
            }
        }
        out.evictions = table.evictions();
        Ok(out)
    })?;

    let mut results: Vec<FlowResult> = Vec::new();
    let (mut forwarded, mut cached, mut evictions) = (0, 0, 0);
    for o in outs {
        results.extend(o.results);
        forwarded += o.forwarded;
        cached += o.cached;
        evictions += o.evictions;
    }
    results.sort_by_key(|r| r.packet);

    let truth: HashMap<FlowKey, usize> = labels.iter().copied().collect();
    let mut first: BTreeMap<FlowKey, usize> = BTreeMap::new();
    for r in &results {
        first.entry(r.key).or_insert(r.class);
    }
    let pairs: Vec<(usize, usize)> = first.iter().filter_map(|(k, &c)| truth.get(k).map(|&t| (t, c))).collect();
    let metrics = (!labels.is_empty()).then(|| Metrics::from_pairs(&pairs, prog.shape.output_width()));
    Ok(Classification {
        packets: packets.len(),
        forwarded,
        cached,
        inferences: results.len(),
        evictions,
        labelled: pairs.len(),
        oracle_mismatches: results.iter().filter(|r| r.exact == Some(false)).count(),
        results,
        metrics,
    })
}

pub fn write_results<W: Write>(w: W, results: &[FlowResult]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["src_ip", "dst_ip", "src_port", "dst_port", "proto", "class", "passes"])?;
    for r in results {
        let k = &r.key;
        wr.write_record([
            k.src.to_string(),
            k.dst.to_string(),
            k.src_port.to_string(),
            k.dst_port.to_string(),
            k.proto.to_string(),
            r.class.to_string(),
            r.passes.to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn save_results(path: impl AsRef<Path>, results: &[FlowResult]) -> Result<()> {
    write_results(std::io::BufWriter::new(std::fs::File::create(path)?), results)
}
