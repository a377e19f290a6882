//! Bit-accurate simulator and cost model for an associative
//! processing-in-memory accelerator.
//!
//! The machine is a content-addressable memory whose rows are processing
//! units: computation happens by comparing all rows against a key in
//! parallel and writing a pattern into the matching rows. On top of that
//! five-instruction core this crate builds:
//!
//! * [`ap`] — the CAM grid, tag register, instruction semantics, and exact
//!   cycle/activity accounting;
//! * [`microcode`] — perfect-induction primitives: truth-table passes,
//!   hazard-free in-place full addition, bit-serial multiply-accumulate,
//!   LUT-based bit-parallel operations, and tag-shift field copies;
//! * [`acsr`] — the associative-CSR sparse weight format, field layouts,
//!   and CAM image load/decode;
//! * [`fc`] — the four-stage fully-connected layer algorithm (broadcast,
//!   multiply, soft reduction, activation), layer chaining, and the
//!   fixed-point reference oracle;
//! * [`cost`] — area/energy/latency/throughput estimation and the
//!   sparsity/wordlength design-space sweeps;
//! * [`cli`] — config parsing and the `run`/`check`/`sweep`/`trace`
//!   commands behind the `apsim` binary.
//!
//! See the `examples/` directory for one runnable example per capability.

pub mod acsr;
pub mod ap;
pub mod cli;
pub mod cost;
pub mod error;
pub mod fc;
pub mod microcode;

pub use error::{Error, Result};
