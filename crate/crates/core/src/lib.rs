//! Unrolled parallel-MRI reconstruction.
//!
//! Sensitivity networks (SN) and parallel coil networks (PCN) alternate a
//! learned residual denoiser with a data-consistency layer for a fixed number
//! of steps. The crate covers the forward models, three data-consistency
//! layers, a small trainable convolutional denoiser with hand-written
//! gradients, supervised training, per-volume semi-supervised finetuning,
//! contrast style transfer, ensembling and evaluation, plus a synthetic
//! multi-coil data plant and binary file formats.

// `!(x > 0.0)` is used on purpose: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cliio;
pub mod datasim;
pub mod dc;
pub mod domain;
pub mod error;
pub mod evalens;
pub mod learn;
pub mod net;
pub mod operators;
pub mod unrolled;

pub use error::{Error, Result};
