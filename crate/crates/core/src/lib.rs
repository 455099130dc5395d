//! Numeric core for skeleton-based rehabilitation assessment.
//!
//! Everything in this crate is pure computation over in-memory values and
//! builds under `no_std` with `alloc`. File formats, run directories and the
//! command-line front end live in the companion `rastg` crate.
//!
//! Module map:
//!
//! * [`tensor`] / [`autograd`]: dense `f64` arrays and a tape-based
//!   reverse-mode differentiation engine.
//! * [`skeleton`]: joint layouts, hop partitions and the normalized
//!   adjacency stack.
//! * [`preprocess`]: fixed-length frame sampling, root/torso normalization and
//!   bone-orientation quaternions.
//! * [`model`]: ST-GCN blocks, per-joint temporal attention and the regression
//!   head.
//! * [`train`]: Huber objective, AdamW, dataset splitting, the training loop and
//!   MAD/RMSE/MAPE evaluation.
//! * [`dataset`] / [`synth`]: sample schema and a synthetic motion generator.
//! * [`feedback`]: joint-contribution heatmaps, score rescaling and period
//!   summaries.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autograd;
pub mod dataset;
mod error;
pub mod feedback;
pub(crate) mod math;
pub mod model;
pub mod preprocess;
pub mod skeleton;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autograd::{ParamId, ParamStore, Parameter, Tape, Var};
pub use error::{Error, Result};
pub use tensor::NdArray;
