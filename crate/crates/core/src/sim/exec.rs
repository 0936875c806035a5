use std::collections::HashMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::program::{slot_field, CmpOp, Cond, Operand, PipelineProgram, StageOp, Target};

use super::phv::Phv;

/// Passes above which traces are not captured unless asked for.
pub const TRACE_PASS_LIMIT: usize = 256;

#[derive(Debug, Clone, Copy)]
enum Val {
    Field(usize),
    Const(i64),
    Slot(usize),
}

#[derive(Debug, Clone, Copy)]
enum Dst {
    Field(usize),
    Slot(usize),
}

#[derive(Debug, Clone)]
enum Test {
    Cmp(CmpOp, Val, Val),
    And(Vec<Test>),
    Or(Vec<Test>),
}

#[derive(Debug, Clone, Copy)]
enum Alu {
    Add,
    Sub,
    Max,
    Min,
}

#[derive(Debug, Clone)]
enum Op {
    Lookup { table: usize, keys: Vec<Val>, outputs: Vec<usize> },
    Alu { f: Alu, dst: Dst, a: Val, b: Val },
    Shl { dst: Dst, a: Val, bits: u32 },
    Shr { dst: Dst, a: Val, bits: u32 },
    Copy { dst: Dst, src: Val },
    Select { dst: Dst, test: Test, then: Val, otherwise: Val },
    If { test: Test, then: Vec<Op>, otherwise: Vec<Op> },
    Digest(Vec<Val>),
}

#[derive(Debug, Clone)]
struct Table {
    name: String,
    entries: HashMap<Vec<i64>, Vec<i64>>,
}

/// One MAT access during a pass.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MatAccess {
    pub stage: usize,
    pub table: String,
    pub key: Vec<i64>,
    pub hit: bool,
}

/// Field values after one stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StageSnapshot {
    pub stage: String,
    pub values: Vec<i64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct PassTrace {
    pub pass: usize,
    /// One snapshot per executed stage.
    pub stages: Vec<StageSnapshot>,
    pub mat_log: Vec<MatAccess>,
    /// Values emitted by digest ops, in execution order.
    pub digests: Vec<Vec<i64>>,
}

/// Result of recirculating one packet until the program completes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Inference {
    pub class: usize,
    pub passes: usize,
    /// Every stored layer output recovered from digests, channel-major.
    pub activations: Vec<Vec<i32>>,
    pub traces: Vec<PassTrace>,
}

/// A program resolved for execution. Immutable, so one instance can serve
/// many inferences concurrently.
#[derive(Debug, Clone)]
pub struct Simulator<'a> {
    prog: &'a PipelineProgram,
    template: Phv,
    tables: Vec<Table>,
    stages: Vec<(String, Vec<Op>)>,
    slots: Vec<usize>,
    done: usize,
    class: usize,
}

struct Resolver<'p> {
    phv: &'p Phv,
    tables: &'p HashMap<&'p str, usize>,
}

impl Resolver<'_> {
    fn field(&self, name: &str) -> Result<usize> {
        self.phv.index_of(name).ok_or_else(|| Error::Program(format!("undeclared field {name}")))
    }

    fn val(&self, o: &Operand) -> Result<Val> {
        Ok(match o {
            Operand::Field(n) => Val::Field(self.field(n)?),
            Operand::Const(c) => Val::Const(*c),
            Operand::Slot(n) => Val::Slot(self.field(n)?),
        })
    }

    fn dst(&self, t: &Target) -> Result<Dst> {
        Ok(match t {
            Target::Field(n) => Dst::Field(self.field(n)?),
            Target::Slot(n) => Dst::Slot(self.field(n)?),
        })
    }

    fn test(&self, c: &Cond) -> Result<Test> {
        Ok(match c {
            Cond::Cmp { op, a, b } => Test::Cmp(*op, self.val(a)?, self.val(b)?),
            Cond::And(v) => Test::And(v.iter().map(|c| self.test(c)).collect::<Result<_>>()?),
            Cond::Or(v) => Test::Or(v.iter().map(|c| self.test(c)).collect::<Result<_>>()?),
        })
    }

    fn alu(&self, f: Alu, dst: &Target, a: &Operand, b: &Operand) -> Result<Op> {
        Ok(Op::Alu { f, dst: self.dst(dst)?, a: self.val(a)?, b: self.val(b)? })
    }

    fn op(&self, op: &StageOp) -> Result<Op> {
        Ok(match op {
            StageOp::Lookup { table, keys, outputs } => Op::Lookup {
                table: *self
                    .tables
                    .get(table.as_str())
                    .ok_or_else(|| Error::Program(format!("unknown table {table}")))?,
                keys: keys.iter().map(|k| self.val(k)).collect::<Result<_>>()?,
                outputs: outputs.iter().map(|o| self.field(o)).collect::<Result<_>>()?,
            },
            StageOp::Add { dst, a, b } => self.alu(Alu::Add, dst, a, b)?,
            StageOp::Sub { dst, a, b } => self.alu(Alu::Sub, dst, a, b)?,
            StageOp::Max { dst, a, b } => self.alu(Alu::Max, dst, a, b)?,
            StageOp::Min { dst, a, b } => self.alu(Alu::Min, dst, a, b)?,
            StageOp::Shl { dst, a, bits } => Op::Shl { dst: self.dst(dst)?, a: self.val(a)?, bits: *bits },
            StageOp::Shr { dst, a, bits } => Op::Shr { dst: self.dst(dst)?, a: self.val(a)?, bits: *bits },
            StageOp::Copy { dst, src } => Op::Copy { dst: self.dst(dst)?, src: self.val(src)? },
            StageOp::Select { dst, cond, then, otherwise } => Op::Select {
                dst: self.dst(dst)?,
                test: self.test(cond)?,
                then: self.val(then)?,
                otherwise: self.val(otherwise)?,
            },
            StageOp::If { cond, then, otherwise } => Op::If {
                test: self.test(cond)?,
                then: then.iter().map(|o| self.op(o)).collect::<Result<_>>()?,
                otherwise: otherwise.iter().map(|o| self.op(o)).collect::<Result<_>>()?,
            },
            StageOp::Digest { values } => Op::Digest(values.iter().map(|v| self.val(v)).collect::<Result<_>>()?),
            StageOp::Mul { .. } | StageOp::Div { .. } => return Err(Error::ForbiddenPrimitive(op.name().into())),
        })
    }
}

/// Per-pass scratch: trace sinks for the pass being executed.
struct PassState<'t> {
    stage: usize,
    trace: Option<&'t mut PassTrace>,
    digests: &'t mut Vec<Vec<i64>>,
}

impl<'a> Simulator<'a> {
    pub fn new(prog: &'a PipelineProgram) -> Result<Self> {
        if prog.stages.len() > prog.meta.stage_budget {
            return Err(Error::Infeasible {
                stage: prog.stages[prog.meta.stage_budget].name.clone(),
                budget: prog.meta.stage_budget,
            });
        }
        let template = Phv::new(&prog.fields)?;
        let mut names = HashMap::new();
        let mut tables = Vec::with_capacity(prog.mats.len());
        for (i, m) in prog.mats.iter().enumerate() {
            if names.insert(m.name.as_str(), i).is_some() {
                return Err(Error::Program(format!("table {} defined twice", m.name)));
            }
            tables.push(Table {
                name: m.name.clone(),
                entries: m.entries.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
            });
        }
        let r = Resolver { phv: &template, tables: &names };
        let stages = prog
            .stages
            .iter()
            .map(|s| Ok((s.name.clone(), s.ops.iter().map(|o| r.op(o)).collect::<Result<_>>()?)))
            .collect::<Result<_>>()?;
        let slots = (0..prog.header.slots).map(|i| r.field(&slot_field(i))).collect::<Result<_>>()?;
        let done = r.field("done")?;
        let class = r.field("class")?;
        Ok(Self { prog, template, tables, stages, slots, done, class })
    }

    pub fn program(&self) -> &PipelineProgram {
        self.prog
    }

    /// Fresh PHV with all fields zero.
    pub fn phv(&self) -> Phv {
        self.template.clone()
    }

    fn slot(&self, phv: &Phv, field: usize) -> Result<usize> {
        let s = phv.read(field);
        usize::try_from(s)
            .ok()
            .and_then(|s| self.slots.get(s).copied())
            .ok_or_else(|| Error::Program(format!("slot {s} out of range (header has {})", self.slots.len())))
    }

    fn val(&self, phv: &Phv, v: Val) -> Result<i64> {
        Ok(match v {
            Val::Field(i) => phv.read(i),
            Val::Const(c) => c,
            Val::Slot(i) => phv.read(self.slot(phv, i)?),
        })
    }

    fn store(&self, phv: &mut Phv, d: Dst, v: i64) -> Result<()> {
        let i = match d {
            Dst::Field(i) => i,
            Dst::Slot(i) => self.slot(phv, i)?,
        };
        phv.write(i, v)
    }

    fn test(&self, phv: &Phv, t: &Test) -> Result<bool> {
        Ok(match t {
            Test::Cmp(op, a, b) => {
                let (a, b) = (self.val(phv, *a)?, self.val(phv, *b)?);
                match op {
                    CmpOp::Eq => a == b,
                    CmpOp::Ne => a != b,
                    CmpOp::Lt => a < b,
                    CmpOp::Le => a <= b,
                    CmpOp::Gt => a > b,
                    CmpOp::Ge => a >= b,
                }
            }
            Test::And(v) => {
                for t in v {
                    if !self.test(phv, t)? {
                        return Ok(false);
                    }
                }
                true
            }
            Test::Or(v) => {
                for t in v {
                    if self.test(phv, t)? {
                        return Ok(true);
                    }
                }
                false
            }
        })
    }

    fn run_ops(&self, phv: &mut Phv, ops: &[Op], st: &mut PassState) -> Result<()> {
        for op in ops {
            match op {
                Op::Lookup { table, keys, outputs } => {
                    let t = &self.tables[*table];
                    let key = keys.iter().map(|k| self.val(phv, *k)).collect::<Result<Vec<_>>>()?;
                    let hit = t.entries.get(&key);
                    if let Some(tr) = st.trace.as_deref_mut() {
                        tr.mat_log.push(MatAccess {
                            stage: st.stage,
                            table: t.name.clone(),
                            key: key.clone(),
                            hit: hit.is_some(),
                        });
                    }
                    let row = hit.ok_or_else(|| Error::TableMiss { table: t.name.clone(), key })?;
                    if row.len() != outputs.len() {
                        return Err(Error::Program(format!(
                            "table {} returns {} values, op expects {}",
                            t.name,
                            row.len(),
                            outputs.len()
                        )));
                    }
                    for (&o, &v) in outputs.iter().zip(row) {
                        phv.write(o, v)?;
                    }
                }
                Op::Alu { f, dst, a, b } => {
                    let (a, b) = (self.val(phv, *a)?, self.val(phv, *b)?);
                    let v = match f {
                        Alu::Add => a + b,
                        Alu::Sub => a - b,
                        Alu::Max => a.max(b),
                        Alu::Min => a.min(b),
                    };
                    self.store(phv, *dst, v)?;
                }
                Op::Shl { dst, a, bits } => {
                    let a = self.val(phv, *a)?;
                    let v = a
                        .checked_shl(*bits)
                        .filter(|v| v >> bits == a)
                        .ok_or_else(|| Error::Program(format!("left shift of {a} by {bits} overflows")))?;
                    self.store(phv, *dst, v)?;
                }
                Op::Shr { dst, a, bits } => {
                    let a = self.val(phv, *a)?;
                    self.store(phv, *dst, a >> (*bits).min(63))?;
                }
                Op::Copy { dst, src } => {
                    let v = self.val(phv, *src)?;
                    self.store(phv, *dst, v)?;
                }
                Op::Select { dst, test, then, otherwise } => {
                    let v = if self.test(phv, test)? { self.val(phv, *then)? } else { self.val(phv, *otherwise)? };
                    self.store(phv, *dst, v)?;
                }
                Op::If { test, then, otherwise } => {
                    let branch = if self.test(phv, test)? { then } else { otherwise };
                    self.run_ops(phv, branch, st)?;
                }
                Op::Digest(vals) => {
                    let v = vals.iter().map(|x| self.val(phv, *x)).collect::<Result<Vec<_>>>()?;
                    st.digests.push(v);
                }
            }
        }
        Ok(())
    }

    fn pass(
        &self,
        phv: &mut Phv,
        index: usize,
        mut trace: Option<&mut PassTrace>,
        digests: &mut Vec<Vec<i64>>,
    ) -> Result<()> {
        phv.reset_metadata();
        for (s, (name, ops)) in self.stages.iter().enumerate() {
            let mut st = PassState { stage: s, trace: trace.as_deref_mut(), digests };
            self.run_ops(phv, ops, &mut st)?;
            if let Some(tr) = trace.as_deref_mut() {
                tr.stages.push(StageSnapshot { stage: name.clone(), values: phv.values().to_vec() });
            }
        }
        if let Some(tr) = trace {
            tr.pass = index;
        }
        Ok(())
    }

    /// Run every stage once. Metadata is zeroed first.
    pub fn execute_pass(&self, phv: &mut Phv, index: usize) -> Result<PassTrace> {
        let mut trace = PassTrace::default();
        let mut digests = Vec::new();
        self.pass(phv, index, Some(&mut trace), &mut digests)?;
        trace.digests = digests;
        Ok(trace)
    }

    /// Load quantized features into the input slots.
    pub fn load_input(&self, q_x: &[i32]) -> Result<Phv> {
        let input = &self.prog.input;
        let n = input.channels * input.length;
        if q_x.len() != n {
            return Err(Error::Dimension(format!("expected {n} input codes, got {}", q_x.len())));
        }
        if let Some(bad) = q_x.iter().find(|&&q| !input.params.contains(q)) {
            return Err(Error::Dimension(format!(
                "input code {bad} outside [{}, {}]",
                input.params.q_min, input.params.q_max
            )));
        }
        let placement = self
            .prog
            .header
            .placement
            .first()
            .filter(|p| p.len() == n)
            .ok_or_else(|| Error::Program("header placement does not cover the input".into()))?;
        let mut phv = self.phv();
        for (&q, &s) in q_x.iter().zip(placement) {
            let f = *self.slots.get(s).ok_or_else(|| Error::Program(format!("input placed in missing slot {s}")))?;
            phv.write(f, i64::from(q))?;
        }
        Ok(phv)
    }

    /// Recirculate until `done`. Traces are kept when the program needs at
    /// most [`TRACE_PASS_LIMIT`] passes.
    pub fn run_inference(&self, q_x: &[i32]) -> Result<Inference> {
        self.run(q_x, self.prog.meta.passes <= TRACE_PASS_LIMIT)
    }

    pub fn run(&self, q_x: &[i32], capture: bool) -> Result<Inference> {
        let mut phv = self.load_input(q_x)?;
        let guard = 2 * self.prog.meta.bound.max(1);
        let sizes = self.prog.shape.boundary_sizes();
        let mut activations: Vec<Vec<Option<i32>>> = sizes[1..].iter().map(|&n| vec![None; n]).collect();
        let mut traces = Vec::new();
        let mut digests = Vec::new();
        let mut passes = 0;
        while phv.read(self.done) == 0 {
            if passes >= guard {
                return Err(Error::NonTermination(guard));
            }
            let mut tr = capture.then(PassTrace::default);
            self.pass(&mut phv, passes, tr.as_mut(), &mut digests)?;
            if let Some(mut tr) = tr {
                tr.digests = digests.clone();
                traces.push(tr);
            }
            for d in digests.drain(..) {
                record(&mut activations, &d)?;
            }
            passes += 1;
        }
        let activations = activations
            .into_iter()
            .enumerate()
            .map(|(l, t)| {
                t.into_iter()
                    .enumerate()
                    .map(|(i, v)| v.ok_or_else(|| Error::Program(format!("layer {l} output {i} was never stored"))))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Inference { class: phv.read(self.class) as usize, passes, activations, traces })
    }
}

fn record(acts: &mut [Vec<Option<i32>>], d: &[i64]) -> Result<()> {
    let bad = || Error::Program(format!("malformed activation digest {d:?}"));
    let [l, i, v] = d else { return Err(bad()) };
    let cell = usize::try_from(*l)
        .ok()
        .and_then(|l| acts.get_mut(l))
        .and_then(|t| usize::try_from(*i).ok().and_then(|i| t.get_mut(i)))
        .ok_or_else(bad)?;
    *cell = Some(i32::try_from(*v).map_err(|_| bad())?);
    Ok(())
}

/// One pass of `prog` over `phv`.
pub fn execute_pass(prog: &PipelineProgram, phv: &mut Phv) -> Result<PassTrace> {
    Simulator::new(prog)?.execute_pass(phv, 0)
}

pub fn run_inference(prog: &PipelineProgram, q_x: &[i32]) -> Result<Inference> {
    Simulator::new(prog)?.run_inference(q_x)
}
