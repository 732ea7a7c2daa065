//! Fusion of dense simulated surface-pressure fields with sparse measurements.
//!
//! A multilayer perceptron is pre-trained on dense data and then fine-tuned on
//! sensor readings with its leading layers frozen. A gappy POD reconstruction
//! (POD basis plus Gaussian-process regression in mode space) is included as
//! the linear baseline, together with a synthetic wing case and an experiment
//! harness that compares the methods.

// Negated comparisons are used deliberately so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod gappy;
pub mod harness;
pub mod hyperopt;
pub mod mlp;
pub mod numeric;
pub mod optim;
pub mod synth;
pub mod transfer;

pub use error::{Error, Result};
