//! Execution of pipeline programs under switch-ASIC rules.
//!
//! A pass runs every stage once, in order. Tables are exact match and a miss
//! is an error, since the compiler is expected to cover every reachable key.
//! The ALU knows add, subtract, min/max, shifts, compare-select and copy;
//! programs containing multiply or divide are rejected when loaded. Header
//! fields persist across recirculation and metadata is zeroed each pass.

mod exec;
mod phv;
mod validate;

pub use exec::{
    execute_pass, run_inference, Inference, MatAccess, PassTrace, Simulator, StageSnapshot, TRACE_PASS_LIMIT,
};
pub use phv::Phv;
pub use validate::{validate_program, ValidationReport, Violation};
