//! Fixed ten-stage map of one CAP-Unit.
//!
//! | stage | work                                                        |
//! |-------|-------------------------------------------------------------|
//! | 0     | layer config and input slot selection                       |
//! | 1     | weight and bias fetch, load both inputs, subtract `Z_x`     |
//! | 2, 3  | one multiplication lookup each                              |
//! | 4     | accumulate, detect the last accumulation step               |
//! | 5     | add bias (FC: fold both halves first), requantize           |
//! | 6     | ReLU as `max(q, Z_a)`                                       |
//! | 7     | max pool of the two halves (conv only)                      |
//! | 8     | store result, digest, running argmax, reset accumulators    |
//! | 9     | control counter cascade, completion and class lookup        |

use crate::program::{CmpOp, Cond, FieldDecl, Operand, Stage, StageOp, Target};

pub const STAGES_PER_UNIT: usize = 10;

pub const STAGE_NAMES: [&str; STAGES_PER_UNIT] =
    ["input_select", "weight_bias", "mult_1", "mult_2", "accumulate", "quantize", "relu", "pool", "storage", "control"];

/// Values of the `config` table, in order.
pub const CONFIG_FIELDS: [&str; 9] =
    ["is_fc", "zx", "za", "relu", "last_acc", "last_ch", "last_in", "is_final", "quant_mode"];

pub const INDEX_WIDTH: u32 = 16;

fn f(name: &str) -> Operand {
    Operand::f(name)
}

fn c(v: i64) -> Operand {
    Operand::Const(v)
}

fn t(name: &str) -> Target {
    Target::f(name)
}

fn lookup(table: &str, keys: &[&str], outputs: &[&str]) -> StageOp {
    StageOp::Lookup {
        table: table.into(),
        keys: keys.iter().map(|k| f(k)).collect(),
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
    }
}

fn add(dst: &str, a: Operand, b: Operand) -> StageOp {
    StageOp::Add { dst: t(dst), a, b }
}

fn copy(dst: &str, src: Operand) -> StageOp {
    StageOp::Copy { dst: t(dst), src }
}

fn max(dst: &str, a: &str, b: &str) -> StageOp {
    StageOp::Max { dst: t(dst), a: f(a), b: f(b) }
}

fn when(cond: Cond, then: Vec<StageOp>) -> StageOp {
    StageOp::If { cond, then, otherwise: Vec::new() }
}

fn branch(cond: Cond, then: Vec<StageOp>, otherwise: Vec<StageOp>) -> StageOp {
    StageOp::If { cond, then, otherwise }
}

fn fields_eq(a: &str, b: &str) -> Cond {
    Cond::cmp(f(a), CmpOp::Eq, f(b))
}

/// PHV declaration for `slots` feature slots of `bits` bits.
pub fn fields(bits: u32, slots: usize) -> Vec<FieldDecl> {
    let w = INDEX_WIDTH;
    let mut v = vec![
        FieldDecl::header("layer_index", w, false),
        FieldDecl::header("input_index", w, false),
        FieldDecl::header("channel_index", w, false),
        FieldDecl::header("conv_flag", w, false),
        FieldDecl::header("done", 1, false),
        FieldDecl::header("acc_temp_1", 32, true),
        FieldDecl::header("acc_temp_2", 32, true),
        FieldDecl::header("best_val", bits, true),
        FieldDecl::header("best_idx", w, false),
        FieldDecl::header("class", w, false),
    ];
    v.extend((0..slots).map(|i| FieldDecl::header(crate::program::slot_field(i), bits, true)));
    let meta = [
        ("is_fc", 1, false),
        ("zx", bits, true),
        ("za", bits, true),
        ("relu", 1, false),
        ("last_acc", w, false),
        ("last_ch", w, false),
        ("last_in", w, false),
        ("is_final", 1, false),
        ("quant_mode", 1, false),
        ("slot_1", w, false),
        ("slot_2", w, false),
        ("w_off_1", bits + 1, true),
        ("w_off_2", bits + 1, true),
        ("bias", 32, true),
        ("x_1", bits, true),
        ("x_2", bits, true),
        ("xo_1", bits + 1, true),
        ("xo_2", bits + 1, true),
        ("prod_1", 2 * bits + 1, true),
        ("prod_2", 2 * bits + 1, true),
        ("is_last", 1, false),
        ("res_1", bits, true),
        ("res_2", bits, true),
        ("cand", bits + 1, true),
        ("thr", 34, true),
        ("out_slot", w, false),
        ("out_idx", w, false),
    ];
    v.extend(meta.iter().map(|&(n, w, s)| FieldDecl::metadata(n, w, s)));
    v
}

/// Binary search of the requantized code of `acc` into `res`.
fn threshold_search(acc: &str, res: &str, q_min: i64, bits: u32) -> Vec<StageOp> {
    let mut ops = vec![copy(res, c(q_min))];
    for k in (0..bits).rev() {
        ops.push(add("cand", f(res), c(1 << k)));
        ops.push(lookup("thresh", &["layer_index", "cand"], &["thr"]));
        ops.push(StageOp::Select {
            dst: t(res),
            cond: Cond::cmp(f(acc), CmpOp::Ge, f("thr")),
            then: f("cand"),
            otherwise: f(res),
        });
    }
    ops
}

fn unit_body(stage: usize, bits: u32, q_min: i64) -> Vec<StageOp> {
    let is_last = || Cond::eq("is_last", 1);
    match stage {
        0 => vec![
            lookup("config", &["layer_index"], &CONFIG_FIELDS),
            lookup("input_select", &["layer_index", "input_index", "conv_flag"], &["slot_1", "slot_2"]),
        ],
        1 => vec![
            lookup("weight", &["layer_index", "channel_index", "conv_flag"], &["w_off_1", "w_off_2"]),
            lookup("bias", &["layer_index", "channel_index"], &["bias"]),
            copy("x_1", Operand::Slot("slot_1".into())),
            copy("x_2", Operand::Slot("slot_2".into())),
            StageOp::Sub { dst: t("xo_1"), a: f("x_1"), b: f("zx") },
            StageOp::Sub { dst: t("xo_2"), a: f("x_2"), b: f("zx") },
        ],
        2 => vec![lookup("mult", &["w_off_1", "xo_1"], &["prod_1"])],
        3 => vec![lookup("mult", &["w_off_2", "xo_2"], &["prod_2"])],
        4 => vec![
            add("acc_temp_1", f("acc_temp_1"), f("prod_1")),
            add("acc_temp_2", f("acc_temp_2"), f("prod_2")),
            StageOp::Select {
                dst: t("is_last"),
                cond: fields_eq("conv_flag", "last_acc"),
                then: c(1),
                otherwise: c(0),
            },
        ],
        5 => {
            let mut search = threshold_search("acc_temp_1", "res_1", q_min, bits);
            search.extend(threshold_search("acc_temp_2", "res_2", q_min, bits));
            vec![when(
                is_last(),
                vec![
                    branch(
                        Cond::eq("is_fc", 1),
                        vec![
                            add("acc_temp_1", f("acc_temp_1"), f("acc_temp_2")),
                            add("acc_temp_1", f("acc_temp_1"), f("bias")),
                            copy("acc_temp_2", f("acc_temp_1")),
                        ],
                        vec![
                            add("acc_temp_1", f("acc_temp_1"), f("bias")),
                            add("acc_temp_2", f("acc_temp_2"), f("bias")),
                        ],
                    ),
                    branch(
                        Cond::eq("quant_mode", 0),
                        vec![
                            lookup("quant", &["layer_index", "acc_temp_1"], &["res_1"]),
                            lookup("quant", &["layer_index", "acc_temp_2"], &["res_2"]),
                        ],
                        search,
                    ),
                ],
            )]
        }
        6 => vec![when(
            Cond::And(vec![is_last(), Cond::eq("relu", 1)]),
            vec![max("res_1", "res_1", "za"), max("res_2", "res_2", "za")],
        )],
        7 => vec![when(Cond::And(vec![is_last(), Cond::eq("is_fc", 0)]), vec![max("res_1", "res_1", "res_2")])],
        8 => vec![when(
            is_last(),
            vec![
                lookup("storage", &["layer_index", "input_index", "channel_index"], &["out_slot", "out_idx"]),
                StageOp::Copy { dst: Target::Slot("out_slot".into()), src: f("res_1") },
                StageOp::Digest { values: vec![f("layer_index"), f("out_idx"), f("res_1")] },
                when(
                    Cond::And(vec![
                        Cond::eq("is_final", 1),
                        Cond::Or(vec![
                            Cond::And(vec![Cond::eq("input_index", 0), Cond::eq("channel_index", 0)]),
                            Cond::cmp(f("res_1"), CmpOp::Gt, f("best_val")),
                            Cond::And(vec![
                                fields_eq("res_1", "best_val"),
                                Cond::cmp(f("out_idx"), CmpOp::Lt, f("best_idx")),
                            ]),
                        ]),
                    ]),
                    vec![copy("best_val", f("res_1")), copy("best_idx", f("out_idx"))],
                ),
                copy("acc_temp_1", c(0)),
                copy("acc_temp_2", c(0)),
            ],
        )],
        9 => vec![branch(
            fields_eq("conv_flag", "last_acc"),
            vec![
                copy("conv_flag", c(0)),
                branch(
                    fields_eq("channel_index", "last_ch"),
                    vec![
                        copy("channel_index", c(0)),
                        branch(
                            fields_eq("input_index", "last_in"),
                            vec![
                                copy("input_index", c(0)),
                                branch(
                                    Cond::eq("is_final", 1),
                                    vec![copy("done", c(1)), lookup("output", &["best_idx"], &["class"])],
                                    vec![add("layer_index", f("layer_index"), c(1))],
                                ),
                            ],
                            vec![add("input_index", f("input_index"), c(1))],
                        ),
                    ],
                    vec![add("channel_index", f("channel_index"), c(1))],
                ),
            ],
            vec![add("conv_flag", f("conv_flag"), c(1))],
        )],
        _ => unreachable!("a unit has {STAGES_PER_UNIT} stages"),
    }
}

/// Stage `stage` of unit copy `unit`, gated on the program not being done.
pub fn unit_stage(unit: usize, stage: usize, bits: u32, q_min: i64) -> Stage {
    Stage {
        name: format!("u{unit}.{}", STAGE_NAMES[stage]),
        ops: vec![when(Cond::eq("done", 0), unit_body(stage, bits, q_min))],
    }
}
