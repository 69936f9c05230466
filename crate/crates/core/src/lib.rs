//! Implicit clustering distillation (iCD) on a small f64 autodiff core.
//!
//! Modules, bottom-up:
//! - [`tensor`]: dense tensors, reverse-mode graph, gradient checker, `ICDT` I/O.
//! - [`nn`]: tiny conv teacher/student nets exposing spatial logit maps.
//! - [`scale`]: multi-scale cell grids and per-cell logit pooling.
//! - [`losses`]: KD, scale-decoupled KD, Gram-matrix iCD and the total objective.
//! - [`data`]: synthetic and CIFAR-binary datasets, seeded batching.
//! - [`train`]: SGD harness, schedules, ablations.
//! - [`analysis`]: teacher/student logit-correlation discrepancy.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod tensor;
pub mod nn;
pub mod scale;
pub mod losses;
pub mod data;
pub mod train;
pub mod analysis;
pub mod gradsuite;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
