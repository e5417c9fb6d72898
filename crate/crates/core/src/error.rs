use std::io;

use thiserror::Error;

/// Errors raised anywhere in the reconstruction pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite data: {0}")]
    NonFiniteData(String),
    #[error("mask violation: {0}")]
    MaskViolation(String),
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("too few calibration lines: {got} (need at least {need})")]
    TooFewLines { got: usize, need: usize },
    #[error("conjugate gradient produced a non-finite iterate at iteration {0}")]
    NonFiniteIterate(usize),
    #[error("invalid network plan: {0}")]
    InvalidPlan(String),
    #[error("tape does not match this forward pass: {0}")]
    StaleTape(String),
    #[error("SSIM mask selects no complete window")]
    EmptyMask,
    #[error("non-finite loss at epoch {epoch}, example {example}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        example: usize,
        detail: String,
    },
    #[error("patch of {patch} columns exceeds frequency-encode width {width}")]
    PatchTooLarge { patch: usize, width: usize },
    #[error("reference image is identically zero")]
    ZeroReference,
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("truncated file: {0}")]
    TruncatedFile(String),
    #[error("header mismatch: {0}")]
    HeaderMismatch(String),
    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::ShapeMismatch(msg.into()))
}
