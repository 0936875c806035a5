use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use serde_json::{json, Value};

use cnn_dataplane::compiler::{compile, resource_report, CompileOptions, CompileReport};
use cnn_dataplane::flow::{
    classify_trace, default_profiles, extract_dataset, featurize, generate_synthetic_trace, load_labels, load_trace,
    normalize_dataset, save_labels, save_results, save_trace, FlowConfig, Normalizer,
};
use cnn_dataplane::model::{CnnModel, ModelShape};
use cnn_dataplane::program::PipelineProgram;
use cnn_dataplane::quant::{quantize_model, quantized_forward, QuantParams, QuantizedModel};
use cnn_dataplane::sim::{validate_program, Simulator};
use cnn_dataplane::train::{accuracy, predict, predict_quantized, prune_channels, train, Dataset, TrainConfig};
use cnn_dataplane::{Error, Execution};

use crate::{Cli, Command, Failure, FitArgs};

pub struct Output {
    text: String,
    json: Value,
    pub failed: bool,
}

impl Output {
    fn ok(text: String, json: Value) -> Self {
        Self { text, json, failed: false }
    }

    pub fn render(&self, as_json: bool) -> String {
        if as_json {
            serde_json::to_string_pretty(&self.json).expect("json values serialize")
        } else {
            self.text.trim_end().to_string()
        }
    }
}

type Res = Result<Output, Failure>;

/// Attach the offending path to an I/O or parse error.
fn at<T>(path: &Path, r: Result<T, Error>) -> Result<T, Failure> {
    r.map_err(|source| Failure::File { path: path.to_path_buf(), source })
}

pub fn run(cli: &Cli) -> Res {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Prune(a) => prune_cmd(a),
        Command::Quantize(a) => quantize_cmd(a),
        Command::Compile(a) => compile_cmd(a),
        Command::Validate(a) => validate_cmd(&a.program),
        Command::Simulate(a) => simulate_cmd(a),
        Command::Classify(a) => classify_cmd(a),
        Command::Report(a) => {
            let rep = resource_report(&at(&a.program, PipelineProgram::load(&a.program))?);
            Ok(Output::ok(report_text(&rep), json!(rep)))
        }
        Command::Oracle(a) => oracle_cmd(a),
    }
}

fn gen_data(a: &crate::GenDataArgs) -> Res {
    if a.classes < 2 {
        return Err(Failure::Usage("--classes must be at least 2".into()));
    }
    let trace = generate_synthetic_trace(a.seed, a.flows_per_class, &default_profiles(a.classes))?;
    let cfg = FlowConfig { packets: a.packets, profile: a.profile.into(), ..FlowConfig::default() };
    let data = extract_dataset(&trace.packets, &trace.labels, &cfg)?;
    at(&a.out_dir, fs::create_dir_all(&a.out_dir).map_err(Error::from))?;
    let (tp, lp, dp) = (a.out_dir.join("trace.csv"), a.out_dir.join("labels.csv"), a.out_dir.join("dataset.csv"));
    at(&tp, save_trace(&tp, &trace.packets))?;
    at(&lp, save_labels(&lp, &trace.labels))?;
    at(&dp, data.save(&dp))?;
    let text = format!(
        "{} packets, {} flows, {} samples of {} features -> {}",
        trace.packets.len(),
        trace.labels.len(),
        data.len(),
        cfg.feature_len(),
        a.out_dir.display()
    );
    Ok(Output::ok(
        text,
        json!({
            "packets": trace.packets.len(),
            "flows": trace.labels.len(),
            "samples": data.len(),
            "features": cfg.feature_len(),
        }),
    ))
}

/// Held-out split of a raw dataset, normalized with `norm` (or bounds fitted
/// on the training part when `None`).
struct Split {
    train: Dataset,
    test: Dataset,
    norm: Normalizer,
}

fn load_split(path: &Path, test_fraction: f64, norm: Option<&Normalizer>) -> Result<Split, Failure> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Failure::Usage("--test-fraction must lie in (0, 1)".into()));
    }
    let (train, test) = at(path, Dataset::load(path))?.split(test_fraction);
    let norm = match norm {
        Some(n) => n.clone(),
        None => Normalizer::fit(train.samples.iter().map(|s| s.features.as_slice()))?,
    };
    Ok(Split { train: normalize_dataset(&train, &norm)?, test: normalize_dataset(&test, &norm)?, norm })
}

fn fit(model: &CnnModel, data: &Dataset, a: &FitArgs) -> Result<CnnModel, Failure> {
    let base = TrainConfig {
        learning_rate: a.lr,
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let mut m = train(model, data, &base)?;
    if let Some(bits) = a.qat_bits {
        info!("fake-quantized fine-tune at {bits} bits");
        let qat = TrainConfig {
            learning_rate: a.lr / 10.0,
            epochs: (a.epochs / 4).max(1),
            qat_enabled: true,
            qat_bits: bits,
            ..base
        };
        m = train(&m, data, &qat)?;
    }
    Ok(m)
}

fn test_accuracy(m: &CnnModel, test: &Dataset) -> Result<f64, Failure> {
    if test.is_empty() {
        return Ok(0.0);
    }
    Ok(accuracy(&predict(m, &test.inputs(), Execution::default())?, &test.labels()))
}

fn train_cmd(a: &crate::TrainArgs) -> Res {
    let split = load_split(&a.fit.data, a.fit.test_fraction, None)?;
    let len = split.train.samples.first().map_or(0, |s| s.features.len());
    let shape = ModelShape::new(1, len, &a.conv, &a.fc)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.fit.seed);
    let mut m = fit(&CnnModel::random(shape, &mut rng)?, &split.train, &a.fit)?;
    m.normalizer = Some(split.norm);
    let acc = test_accuracy(&m, &split.test)?;
    at(&a.out, m.save(&a.out))?;
    let text = format!("trained on {} samples; test accuracy {acc:.4}", split.train.len());
    Ok(Output::ok(text, json!({ "train_samples": split.train.len(), "test_accuracy": acc })))
}

fn prune_cmd(a: &crate::PruneArgs) -> Res {
    let model = at(&a.model, CnnModel::load(&a.model))?;
    let norm = model.normalizer.clone().ok_or(Error::MissingNormalizer)?;
    let split = load_split(&a.fit.data, a.fit.test_fraction, Some(&norm))?;
    let before = test_accuracy(&model, &split.test)?;
    let (pruned, rep) = prune_channels(&model, a.rate)?;
    let mut m = if a.fit.epochs > 0 { fit(&pruned, &split.train, &a.fit)? } else { pruned };
    m.normalizer = Some(norm);
    let after = test_accuracy(&m, &split.test)?;
    at(&a.out, m.save(&a.out))?;
    let mut text = format!(
        "rate {}: FLOPs {} -> {} (reduction {:.4})\ntest accuracy {before:.4} -> {after:.4}\n",
        a.rate,
        rep.flops_before,
        rep.flops_after,
        rep.flops_reduction()
    );
    for l in &rep.layers {
        let _ = writeln!(text, "  layer {}: {} of {} channels kept", l.layer, l.kept.len(), l.original);
    }
    Ok(Output::ok(
        text,
        json!({
            "report": rep,
            "flops_reduction": rep.flops_reduction(),
            "accuracy_before": before,
            "accuracy_after": after,
        }),
    ))
}

fn quantize_cmd(a: &crate::QuantizeArgs) -> Res {
    let model = at(&a.model, CnnModel::load(&a.model))?;
    let qm = quantize_model(&model, a.bits)?;
    at(&a.out, qm.save(&a.out))?;
    let mut text = format!("quantized to {} bits -> {}\n", a.bits, a.out.display());
    let mut out = json!({ "bits": a.bits });
    if let Some(data) = &a.data {
        let norm = model.normalizer.as_ref().ok_or(Error::MissingNormalizer)?;
        let test = load_split(data, a.test_fraction, Some(norm))?.test;
        let x = test.inputs();
        let float = predict(&model, &x, Execution::default())?;
        let int = predict_quantized(&qm, &x, Execution::default())?;
        let (agree, acc) = (accuracy(&int, &float), accuracy(&int, &test.labels()));
        let _ = writeln!(text, "agreement with float {agree:.4}; integer accuracy {acc:.4}");
        out["agreement"] = json!(agree);
        out["accuracy"] = json!(acc);
    }
    Ok(Output::ok(text, out))
}

fn report_text(r: &CompileReport) -> String {
    let mut s = format!(
        "units U = {}, units per pass p = {}, passes = {}, recirculations R = {}, bound = {}\n\
         stages per pass {} of {}; max width C = {}\n\
         header bits max(conv {}, fc {}) = {}; input slots {}; {} bits allocated\n\
         table entries: {} total, {} with per-stage replication\n",
        r.units,
        r.units_per_pass,
        r.passes,
        r.recirculations,
        r.bound,
        r.stages_per_pass,
        r.stage_budget,
        r.max_width,
        r.conv_bits,
        r.fc_bits,
        r.header_bits,
        r.slot_bits,
        r.header_total_bits,
        r.total_entries,
        r.replicated_entries
    );
    for (k, n) in &r.entries {
        let _ = writeln!(s, "  {k}: {n}");
    }
    s
}

fn compile_cmd(a: &crate::CompileArgs) -> Res {
    let qm = at(&a.model, QuantizedModel::load(&a.model))?;
    let opts = CompileOptions { stage_budget: a.stages, units_per_pass: a.units_per_pass, table_cap: a.table_cap };
    let (prog, rep) = compile(&qm, &opts)?;
    at(&a.out, prog.save(&a.out))?;
    Ok(Output::ok(report_text(&rep), json!(rep)))
}

fn validate_cmd(path: &Path) -> Res {
    let rep = validate_program(&at(path, PipelineProgram::load(path))?);
    let mut text = format!("{} keys checked, {} violations\n", rep.keys_checked, rep.violations.len());
    for v in &rep.violations {
        let _ = writeln!(text, "  {}: {}", v.location, v.message);
    }
    Ok(Output { text, json: json!(rep), failed: !rep.is_clean() })
}

/// Input file of `simulate` and `oracle`.
#[derive(Debug, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Features {
    /// Quantized input codes, used as is.
    Codes(Vec<i32>),
    /// Raw flow features; normalized and quantized first.
    Raw(Vec<f64>),
}

fn input_codes(path: &Path, norm: Option<&Normalizer>, params: &QuantParams) -> Result<Vec<i32>, Failure> {
    let text = at(path, fs::read_to_string(path).map_err(Error::from))?;
    Ok(match at(path, serde_json::from_str(&text).map_err(Error::from))? {
        Features::Codes(c) => c,
        Features::Raw(r) => featurize(&r, norm, params)?,
    })
}

fn simulate_cmd(a: &crate::SimulateArgs) -> Res {
    let prog = at(&a.program, PipelineProgram::load(&a.program))?;
    let q = input_codes(&a.features, prog.input.normalizer.as_ref(), &prog.input.params)?;
    let run = Simulator::new(&prog)?.run(&q, a.trace)?;
    let text = format!(
        "class {} after {} passes\nlogits {:?}\n",
        run.class,
        run.passes,
        run.activations.last().unwrap_or(&Vec::new())
    );
    let mut out = json!({
        "class": run.class,
        "passes": run.passes,
        "activations": run.activations,
    });
    if a.trace {
        out["traces"] = json!(run.traces);
    }
    Ok(Output::ok(text, out))
}

fn oracle_cmd(a: &crate::OracleArgs) -> Res {
    let qm = at(&a.model, QuantizedModel::load(&a.model))?;
    let q = input_codes(&a.features, qm.normalizer.as_ref(), qm.input_params())?;
    let f = quantized_forward(&qm, &q)?;
    let text = format!("class {}\nlogits {:?}\n", f.class, f.logits());
    Ok(Output::ok(text, json!({ "class": f.class, "activations": f.activations })))
}

fn classify_cmd(a: &crate::ClassifyArgs) -> Res {
    let prog = at(&a.program, PipelineProgram::load(&a.program))?;
    let packets = at(&a.trace, load_trace(&a.trace))?;
    let labels = match &a.labels {
        Some(p) => at(p, load_labels(p))?,
        None => Vec::new(),
    };
    let oracle = a.oracle.as_ref().map(|p| at(p, QuantizedModel::load(p))).transpose()?;
    let cfg = FlowConfig {
        packets: a.packets,
        iat_limit_us: a.iat_limit_us,
        capacity: a.capacity,
        shards: a.shards,
        profile: a.profile.into(),
    };
    let exec = if a.shards > 1 { Execution::Parallel } else { Execution::Sequential };
    let c = classify_trace(&packets, &labels, &prog, oracle.as_ref(), &cfg, exec)?;
    if let Some(out) = &a.out {
        at(out, save_results(out, &c.results))?;
    }
    let mut text = format!(
        "{} packets: {} inferences, {} cached, {} forwarded, {} evictions\n",
        c.packets, c.inferences, c.cached, c.forwarded, c.evictions
    );
    if oracle.is_some() {
        let _ = writeln!(text, "oracle mismatches: {}", c.oracle_mismatches);
    }
    if let Some(m) = &c.metrics {
        let _ = writeln!(text, "{} labelled flows: accuracy {:.4}, macro F1 {:.4}", c.labelled, m.accuracy, m.macro_f1);
    }
    let failed = c.oracle_mismatches > 0;
    Ok(Output {
        text,
        json: json!({
            "packets": c.packets,
            "inferences": c.inferences,
            "cached": c.cached,
            "forwarded": c.forwarded,
            "evictions": c.evictions,
            "labelled": c.labelled,
            "oracle_mismatches": c.oracle_mismatches,
            "metrics": c.metrics,
        }),
        failed,
    })
}
