use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::Serialize;

use crate::compiler::CONFIG_FIELDS;
use crate::program::{slot_field, Cond, FieldKind, Mat, Operand, PipelineProgram, StageOp, Target};
use crate::quant::compute_qrange;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    /// Stage, table or field the problem was found in.
    pub location: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    /// Reachable keys checked across all tables.
    pub keys_checked: usize,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, location: impl Into<String>, message: impl Into<String>) {
        self.violations.push(Violation { location: location.into(), message: message.into() });
    }
}

/// Static checks: stage budget, primitive whitelist, field and table
/// references, header width sums and MAT key coverage.
///
/// Coverage is recomputed from the control automaton and the tables
/// themselves rather than from the model, so it also catches tables that
/// were edited after compilation.
pub fn validate_program(prog: &PipelineProgram) -> ValidationReport {
    let mut rep = ValidationReport::default();
    if prog.stages.len() > prog.meta.stage_budget {
        rep.push(
            prog.stages[prog.meta.stage_budget].name.clone(),
            format!("{} stages exceed the budget of {}", prog.stages.len(), prog.meta.stage_budget),
        );
    }
    check_fields(prog, &mut rep);
    check_ops(prog, &mut rep);
    for m in &prog.mats {
        for (k, v) in &m.entries {
            if k.len() != m.key_fields.len() || v.len() != m.value_fields.len() {
                rep.push(&m.name, format!("entry {k:?} -> {v:?} has the wrong arity"));
                break;
            }
        }
    }
    check_coverage(prog, &mut rep);
    rep
}

fn check_fields(prog: &PipelineProgram, rep: &mut ValidationReport) {
    let mut seen = HashSet::new();
    for f in &prog.fields {
        if !seen.insert(f.name.as_str()) {
            rep.push(&f.name, "field declared twice");
        }
        if f.width == 0 || f.width > 62 {
            rep.push(&f.name, format!("unsupported width {}", f.width));
        }
    }
    let h = &prog.header;
    let total: u64 = prog.fields.iter().filter(|f| f.kind == FieldKind::Header).map(|f| u64::from(f.width)).sum();
    if total != h.total_bits {
        rep.push("header", format!("header fields sum to {total} bits, layout says {}", h.total_bits));
    }
    let mut slot_bits = 0;
    for i in 0..h.slots {
        match prog.field(&slot_field(i)) {
            Some(f) if f.kind == FieldKind::Header => {
                if f.width != h.bits {
                    rep.push(&f.name, format!("slot width {} differs from {} bits", f.width, h.bits));
                }
                slot_bits += u64::from(f.width);
            }
            _ => rep.push(slot_field(i), "feature slot is not a declared header field"),
        }
    }
    if slot_bits != h.slot_bits {
        rep.push("header", format!("slots sum to {slot_bits} bits, layout says {}", h.slot_bits));
    }
    if h.header_bits != h.conv_bits.max(h.fc_bits) {
        rep.push("header", "header_bits is not max(conv_bits, fc_bits)");
    }
}

fn check_ops(prog: &PipelineProgram, rep: &mut ValidationReport) {
    let declared = |n: &str| prog.field(n).is_some();
    for stage in &prog.stages {
        let loc = &stage.name;
        let mut missing = BTreeSet::new();
        let operand = |o: &Operand, missing: &mut BTreeSet<String>| match o {
            Operand::Field(n) | Operand::Slot(n) if !declared(n) => {
                missing.insert(n.clone());
            }
            _ => {}
        };
        fn cond_operands<'c>(c: &'c Cond, out: &mut Vec<&'c Operand>) {
            match c {
                Cond::Cmp { a, b, .. } => out.extend([a, b]),
                Cond::And(v) | Cond::Or(v) => v.iter().for_each(|c| cond_operands(c, out)),
            }
        }
        for op in &stage.ops {
            op.walk(&mut |op| {
                let mut ops: Vec<&Operand> = Vec::new();
                let mut dst: Option<&Target> = None;
                match op {
                    StageOp::Mul { .. } | StageOp::Div { .. } => {
                        rep.push(loc, format!("primitive {} is not supported by the pipeline", op.name()));
                    }
                    StageOp::Lookup { table, keys, outputs } => {
                        ops.extend(keys);
                        for o in outputs {
                            if !declared(o) {
                                missing.insert(o.clone());
                            }
                        }
                        match prog.mat(table) {
                            None => rep.push(loc, format!("lookup of unknown table {table}")),
                            Some(m) => {
                                if m.key_fields.len() != keys.len() || m.value_fields.len() != outputs.len() {
                                    rep.push(loc, format!("lookup of {table} does not match its key/value arity"));
                                }
                            }
                        }
                    }
                    StageOp::Add { dst: d, a, b }
                    | StageOp::Sub { dst: d, a, b }
                    | StageOp::Max { dst: d, a, b }
                    | StageOp::Min { dst: d, a, b } => {
                        ops.extend([a, b]);
                        dst = Some(d);
                    }
                    StageOp::Shl { dst: d, a, .. }
                    | StageOp::Shr { dst: d, a, .. }
                    | StageOp::Copy { dst: d, src: a } => {
                        ops.push(a);
                        dst = Some(d);
                    }
                    StageOp::Select { dst: d, cond, then, otherwise } => {
                        cond_operands(cond, &mut ops);
                        ops.extend([then, otherwise]);
                        dst = Some(d);
                    }
                    StageOp::If { cond, .. } => cond_operands(cond, &mut ops),
                    StageOp::Digest { values } => ops.extend(values),
                }
                for o in ops {
                    operand(o, &mut missing);
                }
                if let Some(Target::Field(n) | Target::Slot(n)) = dst {
                    if !declared(n) {
                        missing.insert(n.clone());
                    }
                }
            });
        }
        for n in missing {
            rep.push(loc, format!("field {n} is not declared"));
        }
    }
}

/// Union of closed integer intervals.
fn merge(mut v: Vec<(i64, i64)>) -> Vec<(i64, i64)> {
    v.sort_unstable();
    let mut out: Vec<(i64, i64)> = Vec::new();
    for (a, b) in v {
        match out.last_mut() {
            Some(last) if a <= last.1 + 1 => last.1 = last.1.max(b),
            _ => out.push((a, b)),
        }
    }
    out
}

struct Coverage<'r> {
    rep: &'r mut ValidationReport,
    /// Misses reported per table; further ones are only counted.
    misses: BTreeMap<String, usize>,
}

impl Coverage<'_> {
    fn need<'m>(&mut self, m: Option<&'m Mat>, name: &str, key: &[i64]) -> Option<&'m Vec<i64>> {
        self.rep.keys_checked += 1;
        let Some(m) = m else {
            if self.misses.insert(name.to_string(), 1).is_none() {
                self.rep.push(name, "table is missing");
            }
            return None;
        };
        let hit = m.get(key);
        if hit.is_none() {
            let n = self.misses.entry(name.to_string()).or_default();
            *n += 1;
            if *n <= 3 {
                self.rep.push(name, format!("reachable key {key:?} has no entry"));
            }
        }
        hit
    }
}

fn check_coverage(prog: &PipelineProgram, rep: &mut ValidationReport) {
    let mut cov = Coverage { rep, misses: BTreeMap::new() };
    let (config, select, weight, bias, mult, quant, thresh, storage, output) = (
        prog.mat("config"),
        prog.mat("input_select"),
        prog.mat("weight"),
        prog.mat("bias"),
        prog.mat("mult"),
        prog.mat("quant"),
        prog.mat("thresh"),
        prog.mat("storage"),
        prog.mat("output"),
    );
    let Ok((q_min, q_max)) = compute_qrange(prog.meta.bits, true) else {
        cov.rep.push("meta", format!("unsupported bit-width {}", prog.meta.bits));
        return;
    };
    let col = |name: &str| CONFIG_FIELDS.iter().position(|f| *f == name).expect("config column");
    let slots = prog.header.slots as i64;
    let mut final_outputs = BTreeSet::new();

    for (l, ctl) in prog.control.layers.iter().enumerate() {
        let l = l as i64;
        let Some(cfg) = cov.need(config, "config", &[l]).cloned() else {
            continue;
        };
        if cfg.len() != CONFIG_FIELDS.len() {
            continue;
        }
        let zx = cfg[col("zx")];
        let is_fc = cfg[col("is_fc")] == 1;
        let is_final = cfg[col("is_final")] == 1;
        let threshold = cfg[col("quant_mode")] == 1;
        if (cfg[col("last_acc")], cfg[col("last_ch")], cfg[col("last_in")])
            != (ctl.last_acc, ctl.last_channel, ctl.last_input)
        {
            cov.rep.push("config", format!("layer {l} limits disagree with the control automaton"));
        }
        let (xl, xh) = (i64::from(q_min) - zx, i64::from(q_max) - zx);
        // Accumulator span of each output channel: bias plus the extreme
        // products of every accumulation step.
        let mut spans = Vec::new();
        let mut checked_w = HashSet::new();
        for i in 0..=ctl.last_input {
            for ch in 0..=ctl.last_channel {
                let b = cov.need(bias, "bias", &[l, ch]).map_or(0, |v| v[0]);
                let (mut lo, mut hi) = ([b, b], [b, b]);
                for a in 0..=ctl.last_acc {
                    if let Some(s) = cov.need(select, "input_select", &[l, i, a]) {
                        if s.iter().any(|&s| s < 0 || s >= slots) {
                            cov.rep
                                .push("input_select", format!("key [{l}, {i}, {a}] selects a slot outside 0..{slots}"));
                        }
                    }
                    let Some(w) = cov.need(weight, "weight", &[l, ch, a]).cloned() else {
                        continue;
                    };
                    for (j, &w) in w.iter().enumerate().take(2) {
                        if checked_w.insert(w) {
                            for x in xl..=xh {
                                cov.need(mult, "mult", &[w, x]);
                            }
                        }
                        lo[j] += (w * xl).min(w * xh);
                        hi[j] += (w * xl).max(w * xh);
                    }
                }
                if is_fc {
                    // Both halves are summed; the bias was counted twice.
                    spans.push((lo[0] + lo[1] - b, hi[0] + hi[1] - b));
                } else {
                    spans.push((lo[0], hi[0]));
                    spans.push((lo[1], hi[1]));
                }
                if let Some(s) = cov.need(storage, "storage", &[l, i, ch]) {
                    if s.len() == 2 && (s[0] < 0 || s[0] >= slots) {
                        cov.rep.push("storage", format!("key [{l}, {i}, {ch}] stores outside 0..{slots}"));
                    }
                    if is_final && s.len() == 2 {
                        final_outputs.insert(s[1]);
                    }
                }
            }
        }
        if threshold {
            for code in (q_min + 1)..=q_max {
                cov.need(thresh, "thresh", &[l, i64::from(code)]);
            }
        } else {
            for (a, b) in merge(spans) {
                for acc in a..=b {
                    cov.need(quant, "quant", &[l, acc]);
                }
            }
        }
    }
    for idx in final_outputs {
        cov.need(output, "output", &[idx]);
    }
    for (table, n) in cov.misses {
        if n > 3 {
            cov.rep.push(table, format!("{n} reachable keys missing in total"));
        }
    }
}
