//! gnnear: a functional, cycle-approximate simulator for a DIMM-based
//! near-memory GNN training accelerator.
//!
//! The modeled machine pairs a Centralized Acceleration Engine (CAE, a
//! weight-stationary systolic array plus SIMD vector units) with one
//! Near-Memory Engine (NME) per DIMM. NMEs execute the reduction half of
//! full-batch GNN training against their local ranks; the CAE merges the
//! per-DIMM partial aggregates and runs the dense combination work. The
//! simulator is functional (it carries real feature values through the
//! modeled dataflow so results can be checked against a plain reference
//! trainer) and cycle-approximate (DDR4 command-level timing per DIMM,
//! exact-rational clock conversion between the memory, NME and CAE domains).

pub mod bf16;
pub mod cae;
pub mod cli;
pub mod config;
pub mod graph;
pub mod isa;
pub mod metrics;
pub mod model;
pub mod nme;
pub mod partition;
pub mod sim;
pub mod timing;

use thiserror::Error;

/// Unified error for the library. Variants follow the failure taxonomy of
/// the public operations: parse/input errors from loaders, config errors
/// from validation, capacity errors from hardware budget checks, protocol
/// errors from machine-state violations, and domain errors from bad
/// arguments to pure functions.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("input error: {0}")]
    Input(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("capacity error: {0}")]
    Capacity(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("encoding error: {0}")]
    Encoding(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
