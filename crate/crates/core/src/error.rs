use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::Shape;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("{op}: shape mismatch {lhs} vs {rhs}")]
    ShapeMismatch { op: &'static str, lhs: Shape, rhs: Shape },
    #[error("{op}: channel mismatch, expected {expected} got {actual}")]
    ChannelMismatch { op: &'static str, expected: usize, actual: usize },
    #[error("kernel size {0} must be odd")]
    EvenKernel(usize),
    #[error("{0}: spatial dims {1}x{2} must be even")]
    OddSpatial(&'static str, usize, usize),
    #[error("{0}: non-finite value")]
    NonFinite(&'static str),
    #[error("{0}: empty input")]
    EmptyInput(&'static str),
    #[error("expected a scalar, got shape {0}")]
    NotScalar(Shape),
    #[error("node {0} does not belong to this tape")]
    ForeignNode(usize),
    #[error("label {label} outside [0, {classes})")]
    InvalidLabel { label: usize, classes: usize },
    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
