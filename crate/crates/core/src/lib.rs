//! Universal domain adaptation with a closed-set classifier and a bank of
//! one-vs-all open-set classifiers.
//!
//! The crate covers the full experiment loop on small, CPU-sized problems:
//! synthetic scenario generation ([`scenario`]), the extractor and heads
//! ([`model`]), the target memory bank ([`memory`]), every training loss
//! ([`losses`]), the optimizer and training loop ([`trainer`]) and H-score
//! evaluation with unknown rejection ([`eval`]).

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod eval;
pub mod losses;
pub mod math;
pub mod memory;
pub mod model;
pub mod par;
pub mod rng;
pub mod scenario;
pub mod trainer;

pub use error::{Error, Result};
pub use math::{Tape, Tensor2, Var};
