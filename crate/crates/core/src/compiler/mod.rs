//! Lowering of a quantized model to a pipeline program.
//!
//! The model is split into CAP-Units, each processing two input features
//! through the fixed ten-stage map in [`stages`]. A pass executes `p` unit
//! copies back to back; the packet recirculates until the control counters
//! wrap past the last layer.

mod header;
mod stages;
mod tables;
mod units;

pub use header::{allocate_header, header_formula, replay_header, ReplayReport};
pub use stages::{CONFIG_FIELDS, STAGES_PER_UNIT, STAGE_NAMES};
pub use tables::{
    acc_range, build_mult_table, build_quant_table, build_threshold_table, extend_mult_table, threshold_lookup,
    DEFAULT_TABLE_CAP,
};
pub use units::{modularize, modularize_shape, recirculation_bound, unit_count, CapUnit};

use std::collections::BTreeMap;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LayerKind;
use crate::program::{
    ControlAutomaton, FieldKind, InputSpec, LayerControl, Mat, MatKind, PipelineProgram, ProgramMeta, QuantMode,
};
use crate::quant::QuantizedModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompileOptions {
    pub stage_budget: usize,
    pub units_per_pass: usize,
    /// Largest table a single layer may contribute.
    pub table_cap: u64,
}

impl Default for CompileOptions {
    fn default() -> Self {
        Self { stage_budget: 12, units_per_pass: 1, table_cap: DEFAULT_TABLE_CAP }
    }
}

/// Logical resource usage of a compiled program.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompileReport {
    pub units: usize,
    pub units_per_pass: usize,
    pub passes: usize,
    pub recirculations: usize,
    pub bound: usize,
    pub max_width: usize,
    pub stages_per_pass: usize,
    pub stage_budget: usize,
    /// Entries per table kind; every kind is listed.
    pub entries: BTreeMap<String, usize>,
    pub total_entries: usize,
    /// Entries counted once per stage that references the table, as a
    /// replicated-per-stage hardware layout would store them.
    pub replicated_entries: usize,
    pub conv_bits: u64,
    pub fc_bits: u64,
    pub header_bits: u64,
    pub slot_bits: u64,
    pub header_total_bits: u64,
    pub quant_modes: Vec<QuantMode>,
}

pub fn resource_report(prog: &PipelineProgram) -> CompileReport {
    let mut entries: BTreeMap<String, usize> = MatKind::ALL.iter().map(|k| (k.as_str().to_string(), 0)).collect();
    for m in &prog.mats {
        *entries.entry(m.kind.as_str().to_string()).or_default() += m.len();
    }
    let mut refs: BTreeMap<&str, usize> = BTreeMap::new();
    for stage in &prog.stages {
        let mut seen = std::collections::BTreeSet::new();
        for op in &stage.ops {
            op.walk(&mut |o| {
                if let crate::program::StageOp::Lookup { table, .. } = o {
                    seen.insert(table.as_str());
                }
            });
        }
        for t in seen {
            *refs.entry(t).or_default() += 1;
        }
    }
    let replicated = prog.mats.iter().map(|m| m.len() * refs.get(m.name.as_str()).copied().unwrap_or(0)).sum();
    let m = &prog.meta;
    let h = &prog.header;
    CompileReport {
        units: m.units,
        units_per_pass: m.units_per_pass,
        passes: m.passes,
        recirculations: m.recirculations,
        bound: m.bound,
        max_width: m.max_width,
        stages_per_pass: prog.stages.len(),
        stage_budget: m.stage_budget,
        total_entries: entries.values().sum(),
        entries,
        replicated_entries: replicated,
        conv_bits: h.conv_bits,
        fc_bits: h.fc_bits,
        header_bits: h.header_bits,
        slot_bits: h.slot_bits,
        header_total_bits: h.total_bits,
        quant_modes: m.quant_modes.clone(),
    }
}

fn index_fits(what: &str, v: usize) -> Result<i64> {
    if v >= 1 << stages::INDEX_WIDTH {
        return Err(Error::Program(format!("{what} {v} exceeds the {}-bit index fields", stages::INDEX_WIDTH)));
    }
    Ok(v as i64)
}

pub fn compile(qm: &QuantizedModel, opts: &CompileOptions) -> Result<(PipelineProgram, CompileReport)> {
    qm.validate()?;
    let p = opts.units_per_pass;
    if p == 0 {
        return Err(Error::Config("units per pass must be at least 1".into()));
    }
    let needed = p * STAGES_PER_UNIT;
    if needed > opts.stage_budget {
        let unit = opts.stage_budget / STAGES_PER_UNIT;
        let stage = opts.stage_budget % STAGES_PER_UNIT;
        return Err(Error::Infeasible { stage: format!("u{unit}.{}", STAGE_NAMES[stage]), budget: opts.stage_budget });
    }

    let shape = &qm.shape;
    let (units, u) = modularize(qm);
    let bits = qm.bits;
    let mut header = header::allocate_with_units(shape, bits, &units);
    index_fits("slot count", header.slots)?;

    let specs = shape.layers();
    let mut config = Mat::new("config", MatKind::Config, &["layer_index"], &stages::CONFIG_FIELDS);
    let mut select = Mat::new(
        "input_select",
        MatKind::InputSelect,
        &["layer_index", "input_index", "conv_flag"],
        &["slot_1", "slot_2"],
    );
    let mut weight =
        Mat::new("weight", MatKind::Weight, &["layer_index", "channel_index", "conv_flag"], &["w_off_1", "w_off_2"]);
    let mut bias = Mat::new("bias", MatKind::Bias, &["layer_index", "channel_index"], &["bias"]);
    let mut storage = Mat::new(
        "storage",
        MatKind::Storage,
        &["layer_index", "input_index", "channel_index"],
        &["out_slot", "out_idx"],
    );
    let mut output = Mat::new("output", MatKind::Output, &["best_idx"], &["class"]);
    let mut mult = tables::empty_mult_table();
    let mut quant = tables::empty_quant_table();
    let mut thresh = tables::empty_threshold_table();
    let mut controls = Vec::with_capacity(specs.len());
    let mut modes = Vec::with_capacity(specs.len());

    for (spec, layer) in specs.iter().zip(&qm.layers) {
        let l = spec.index as i64;
        let (last_in, last_ch, last_acc) = match spec.kind {
            LayerKind::Conv => (spec.out_len - 1, spec.out_dim - 1, spec.in_dim - 1),
            LayerKind::Fc => (0, spec.out_dim - 1, spec.in_dim.div_ceil(2) - 1),
        };
        let range = acc_range(layer);
        let mode = match build_quant_table(spec.index, &layer.requant, range, opts.table_cap) {
            Ok(t) => {
                quant.entries.extend(t.entries);
                QuantMode::Table
            }
            Err(Error::Capacity { entries, .. }) => {
                debug!("layer {l}: {entries} accumulator values, using threshold search");
                thresh.entries.extend(build_threshold_table(spec.index, &layer.requant, range).entries);
                QuantMode::Threshold
            }
            Err(e) => return Err(e),
        };
        modes.push(mode);
        config.entries.insert(
            vec![l],
            vec![
                i64::from(spec.kind == LayerKind::Fc),
                i64::from(layer.input.zero_point),
                i64::from(layer.output.zero_point),
                i64::from(layer.relu),
                index_fits("accumulation count", last_acc)?,
                index_fits("channel count", last_ch)?,
                index_fits("position count", last_in)?,
                i64::from(spec.is_last),
                i64::from(mode == QuantMode::Threshold),
            ],
        );
        controls.push(LayerControl {
            kind: spec.kind,
            last_input: last_in as i64,
            last_channel: last_ch as i64,
            last_acc: last_acc as i64,
        });
        extend_mult_table(&mut mult, &layer.weight, &layer.input, opts.table_cap)?;
        for (o, &b) in layer.biases.iter().enumerate() {
            bias.entries.insert(vec![l, o as i64], vec![i64::from(b)]);
        }
    }

    for unit in &units {
        let l = unit.layer as i64;
        let place = &header.placement[unit.layer];
        select.entries.insert(
            vec![l, unit.input_index as i64, unit.acc as i64],
            vec![place[unit.inputs[0]] as i64, place[unit.inputs[1]] as i64],
        );
        let layer = &qm.layers[unit.layer];
        let w = |r: Option<(usize, usize)>| r.map_or(0, |(o, i)| i64::from(layer.weight_offset(o, i)));
        weight
            .entries
            .insert(vec![l, unit.channel as i64, unit.acc as i64], vec![w(unit.weights[0]), w(unit.weights[1])]);
        if unit.is_last_channel {
            let slot = header.placement[unit.layer + 1][unit.output];
            storage.entries.insert(
                vec![l, unit.input_index as i64, unit.channel as i64],
                vec![slot as i64, index_fits("output index", unit.output)?],
            );
        }
    }
    for c in 0..shape.output_width() {
        output.entries.insert(vec![c as i64], vec![c as i64]);
    }

    let q_min = i64::from(qm.input_params().q_min);
    let stage_list = (0..p)
        .flat_map(|k| (0..STAGES_PER_UNIT).map(move |s| (k, s)))
        .map(|(k, s)| stages::unit_stage(k, s, bits, q_min))
        .collect();
    let fields = stages::fields(bits, header.slots);
    header.total_bits = fields.iter().filter(|f| f.kind == FieldKind::Header).map(|f| u64::from(f.width)).sum();

    let passes = u.div_ceil(p);
    let prog = PipelineProgram {
        meta: ProgramMeta {
            units: u,
            units_per_pass: p,
            passes,
            recirculations: passes - 1,
            bound: recirculation_bound(shape, p),
            max_width: shape.max_width(),
            stage_budget: opts.stage_budget,
            bits,
            quant_modes: modes,
        },
        shape: shape.clone(),
        input: InputSpec {
            channels: shape.input_channels,
            length: shape.input_len,
            params: *qm.input_params(),
            normalizer: qm.normalizer.clone(),
        },
        fields,
        stages: stage_list,
        mats: vec![config, select, weight, bias, mult, quant, thresh, storage, output],
        header,
        control: ControlAutomaton { layers: controls },
    };
    let report = resource_report(&prog);
    Ok((prog, report))
}
