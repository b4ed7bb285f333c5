//! Neuro mixture-of-experts decoding of region-localized EEG.
//!
//! The crate is `no_std` (it needs `alloc`) and carries everything that is
//! pure computation:
//!
//! - [`graph`], [`params`], [`gradcheck`]: a small deterministic reverse-mode
//!   differentiation core with an SGD optimizer and a central-difference oracle.
//! - [`montage`]: electrode montages and the seven-region anatomical partition.
//! - [`experts`]: the compact convolutional regional expert and the
//!   convolution + transformer global expert.
//! - [`router`]: softmax routing gate, feature fusion and the prediction head.
//! - [`objective`]: classification and distillation losses plus the
//!   progress-driven loss-weight schedule.
//! - [`data`]: trials, synthetic region-localized data, z-scoring and
//!   session-wise splits.
//! - [`model`], [`train`], [`metrics`], [`analysis`]: model assembly per
//!   ablation variant, the training loop, evaluation metrics, routing analysis.
//!
//! File formats, configuration files and the command line live in the
//! `brainstack` companion crate.
#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod analysis;
pub mod checks;
pub mod data;
pub mod experts;
pub mod gradcheck;
pub mod graph;
pub mod math;
pub mod metrics;
pub mod model;
pub mod montage;
pub mod nn;
pub mod objective;
pub mod params;
pub mod rng;
pub mod router;
pub mod tensor;
pub mod train;

pub use graph::{Graph, GraphError, Mode, NodeId};
pub use params::{BufferId, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
