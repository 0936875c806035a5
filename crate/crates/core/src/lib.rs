//! Toolchain for running small 1D convolutional networks inside a
//! programmable switch pipeline.
//!
//! The flow through the crate mirrors the deployment workflow:
//!
//! 1. [`model`] defines the float network and its reference forward pass.
//! 2. [`train`] fits it with SGD, records activation ranges, prunes channels
//!    and fine-tunes with fake quantization.
//! 3. [`quant`] turns it into an integer-only network and provides the
//!    reference integer forward pass.
//! 4. [`compiler`] splits the integer network into CAP-Units, lays out the
//!    packet header and materializes every match-action table.
//! 5. [`sim`] executes the compiled [`program::PipelineProgram`] under PISA
//!    restrictions (exact-match tables, no multiply, bounded stages).
//! 6. [`flow`] extracts per-flow features from packet traces and drives
//!    inference on the simulator.

// Index loops over parallel arrays read better than zipped iterators here.
#![allow(clippy::needless_range_loop)]

pub mod compiler;
pub mod error;
pub mod exec;
pub mod flow;
pub mod model;
pub mod program;
pub mod quant;
pub mod sim;
pub mod train;

pub use error::{Error, Result};
pub use exec::Execution;
