//! Pipeline program format: the compiler's output and the simulator's input.
//!
//! A program is a fixed list of stages executed once per pass. Each stage
//! holds primitive operations over named PHV fields and exact-match table
//! lookups. All tables are stored once in [`PipelineProgram::mats`] and
//! referenced by name.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::flow::Normalizer;
use crate::model::{LayerKind, ModelShape};
use crate::quant::QuantParams;

/// Header fields persist across recirculation; metadata is zeroed every pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    Header,
    Metadata,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldDecl {
    pub name: String,
    pub width: u32,
    pub signed: bool,
    pub kind: FieldKind,
}

impl FieldDecl {
    pub fn header(name: impl Into<String>, width: u32, signed: bool) -> Self {
        Self { name: name.into(), width, signed, kind: FieldKind::Header }
    }

    pub fn metadata(name: impl Into<String>, width: u32, signed: bool) -> Self {
        Self { name: name.into(), width, signed, kind: FieldKind::Metadata }
    }

    /// Inclusive value range representable by the field.
    pub fn bounds(&self) -> (i64, i64) {
        if self.signed {
            (-(1i64 << (self.width - 1)), (1i64 << (self.width - 1)) - 1)
        } else {
            (0, (1i64 << self.width) - 1)
        }
    }
}

/// Name of feature slot `i` in the header stack.
pub fn slot_field(i: usize) -> String {
    format!("feat.{i}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operand {
    Field(String),
    Const(i64),
    /// Feature slot whose index is held in the named field.
    Slot(String),
}

impl Operand {
    pub fn f(name: &str) -> Self {
        Operand::Field(name.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Field(String),
    Slot(String),
}

impl Target {
    pub fn f(name: &str) -> Self {
        Target::Field(name.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cond {
    Cmp { op: CmpOp, a: Operand, b: Operand },
    And(Vec<Cond>),
    Or(Vec<Cond>),
}

impl Cond {
    pub fn cmp(a: Operand, op: CmpOp, b: Operand) -> Self {
        Cond::Cmp { op, a, b }
    }

    pub fn eq(field: &str, v: i64) -> Self {
        Cond::cmp(Operand::f(field), CmpOp::Eq, Operand::Const(v))
    }
}

/// One primitive action. `Mul` and `Div` exist only so that programs using
/// them can be represented and rejected by validation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum StageOp {
    Lookup {
        table: String,
        keys: Vec<Operand>,
        outputs: Vec<String>,
    },
    Add {
        dst: Target,
        a: Operand,
        b: Operand,
    },
    Sub {
        dst: Target,
        a: Operand,
        b: Operand,
    },
    Max {
        dst: Target,
        a: Operand,
        b: Operand,
    },
    Min {
        dst: Target,
        a: Operand,
        b: Operand,
    },
    Shl {
        dst: Target,
        a: Operand,
        bits: u32,
    },
    Shr {
        dst: Target,
        a: Operand,
        bits: u32,
    },
    Copy {
        dst: Target,
        src: Operand,
    },
    Select {
        dst: Target,
        cond: Cond,
        then: Operand,
        otherwise: Operand,
    },
    If {
        cond: Cond,
        then: Vec<StageOp>,
        #[serde(default)]
        otherwise: Vec<StageOp>,
    },
    Digest {
        values: Vec<Operand>,
    },
    Mul {
        dst: Target,
        a: Operand,
        b: Operand,
    },
    Div {
        dst: Target,
        a: Operand,
        b: Operand,
    },
}

impl StageOp {
    pub fn name(&self) -> &'static str {
        match self {
            StageOp::Lookup { .. } => "lookup",
            StageOp::Add { .. } => "add",
            StageOp::Sub { .. } => "sub",
            StageOp::Max { .. } => "max",
            StageOp::Min { .. } => "min",
            StageOp::Shl { .. } => "shl",
            StageOp::Shr { .. } => "shr",
            StageOp::Copy { .. } => "copy",
            StageOp::Select { .. } => "select",
            StageOp::If { .. } => "if",
            StageOp::Digest { .. } => "digest",
            StageOp::Mul { .. } => "mul",
            StageOp::Div { .. } => "div",
        }
    }

    /// Visit this op and every nested op.
    pub fn walk<'a>(&'a self, f: &mut impl FnMut(&'a StageOp)) {
        f(self);
        if let StageOp::If { then, otherwise, .. } = self {
            then.iter().chain(otherwise).for_each(|op| op.walk(f));
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    pub ops: Vec<StageOp>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatKind {
    Config,
    InputSelect,
    Weight,
    Bias,
    Multiplication,
    Quantization,
    Pooling,
    Storage,
    Output,
}

impl MatKind {
    pub const ALL: [MatKind; 9] = [
        MatKind::Config,
        MatKind::InputSelect,
        MatKind::Weight,
        MatKind::Bias,
        MatKind::Multiplication,
        MatKind::Quantization,
        MatKind::Pooling,
        MatKind::Storage,
        MatKind::Output,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MatKind::Config => "config",
            MatKind::InputSelect => "input_select",
            MatKind::Weight => "weight",
            MatKind::Bias => "bias",
            MatKind::Multiplication => "multiplication",
            MatKind::Quantization => "quantization",
            MatKind::Pooling => "pooling",
            MatKind::Storage => "storage",
            MatKind::Output => "output",
        }
    }
}

/// Exact-match table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mat {
    pub name: String,
    pub kind: MatKind,
    pub key_fields: Vec<String>,
    pub value_fields: Vec<String>,
    #[serde(with = "entry_list")]
    pub entries: BTreeMap<Vec<i64>, Vec<i64>>,
}

impl Mat {
    pub fn new(name: &str, kind: MatKind, key_fields: &[&str], value_fields: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            kind,
            key_fields: key_fields.iter().map(|s| s.to_string()).collect(),
            value_fields: value_fields.iter().map(|s| s.to_string()).collect(),
            entries: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: &[i64]) -> Option<&Vec<i64>> {
        self.entries.get(key)
    }
}

/// Entries serialize as a sorted list of `[key, value]` pairs.
mod entry_list {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serializer};

    type Entries = BTreeMap<Vec<i64>, Vec<i64>>;

    pub fn serialize<S: Serializer>(e: &Entries, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(e.iter())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Entries, D::Error> {
        let pairs: Vec<(Vec<i64>, Vec<i64>)> = Vec::deserialize(d)?;
        let n = pairs.len();
        let map: Entries = pairs.into_iter().collect();
        if map.len() != n {
            return Err(serde::de::Error::custom("duplicate table key"));
        }
        Ok(map)
    }
}

/// A slot written over a previous tensor's slot once that tensor is dead.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Overlay {
    pub unit: usize,
    /// Boundary tensor (0 is the input) and element written.
    pub tensor: usize,
    pub index: usize,
    pub slot: usize,
    pub replaces: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeaderLayout {
    pub bits: u32,
    pub conv_bits: u64,
    pub fc_bits: u64,
    /// `max(conv_bits, fc_bits)`.
    pub header_bits: u64,
    /// Feature slots actually allocated.
    pub slots: usize,
    /// `slots * bits`.
    pub slot_bits: u64,
    /// Header bits of every header field, slots included.
    pub total_bits: u64,
    /// `placement[tensor][element]` is the slot holding that element.
    pub placement: Vec<Vec<usize>>,
    pub overlays: Vec<Overlay>,
}

/// Per-layer limits of the control counters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerControl {
    pub kind: LayerKind,
    pub last_input: i64,
    pub last_channel: i64,
    pub last_acc: i64,
}

/// Counter cascade: `conv_flag`, then `channel_index`, then `input_index`,
/// then `layer_index`; `done` is raised when the last layer wraps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlAutomaton {
    pub layers: Vec<LayerControl>,
}

impl ControlAutomaton {
    /// Every `(layer, input, channel, acc)` state in execution order.
    pub fn states(&self) -> Vec<[i64; 4]> {
        let mut out = Vec::new();
        for (l, c) in self.layers.iter().enumerate() {
            for i in 0..=c.last_input {
                for ch in 0..=c.last_channel {
                    for a in 0..=c.last_acc {
                        out.push([l as i64, i, ch, a]);
                    }
                }
            }
        }
        out
    }

    pub fn unit_count(&self) -> usize {
        self.layers.iter().map(|c| ((c.last_input + 1) * (c.last_channel + 1) * (c.last_acc + 1)) as usize).sum()
    }
}

/// How raw features become the header's input slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSpec {
    pub channels: usize,
    pub length: usize,
    pub params: QuantParams,
    #[serde(default)]
    pub normalizer: Option<Normalizer>,
}

/// Per-layer requantization mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantMode {
    /// Direct table keyed by the biased accumulator.
    Table,
    /// Binary search over code thresholds.
    Threshold,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProgramMeta {
    pub units: usize,
    pub units_per_pass: usize,
    pub passes: usize,
    pub recirculations: usize,
    pub bound: usize,
    pub max_width: usize,
    pub stage_budget: usize,
    pub bits: u32,
    /// Requantization mode of every layer.
    pub quant_modes: Vec<QuantMode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineProgram {
    pub meta: ProgramMeta,
    pub shape: ModelShape,
    pub input: InputSpec,
    pub fields: Vec<FieldDecl>,
    pub stages: Vec<Stage>,
    pub mats: Vec<Mat>,
    pub header: HeaderLayout,
    pub control: ControlAutomaton,
}

impl PipelineProgram {
    pub fn mat(&self, name: &str) -> Option<&Mat> {
        self.mats.iter().find(|m| m.name == name)
    }

    pub fn mat_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.mats.iter_mut().find(|m| m.name == name)
    }

    pub fn field(&self, name: &str) -> Option<&FieldDecl> {
        self.fields.iter().find(|f| f.name == name)
    }

    /// Byte-stable JSON.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}
