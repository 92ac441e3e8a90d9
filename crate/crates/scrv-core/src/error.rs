//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {left:?} vs {right:?} not broadcastable")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },

    #[error("matmul inner dimensions differ: {left:?} x {right:?}")]
    InnerDimMismatch { left: Vec<usize>, right: Vec<usize> },

    #[error("tensors belong to different tapes")]
    TapeMismatch,

    #[error("conv2d: {0}")]
    ConvInvalid(String),

    #[error("spatial extent collapsed below 1x1 ({0})")]
    SpatialCollapse(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid tensor operation: {0}")]
    InvalidOp(String),

    #[error("labels must be 0 or 1, got {0}")]
    NonBinaryLabel(f64),

    #[error("corpus root {0} is empty or missing")]
    EmptyCorpus(PathBuf),

    #[error("class {name} has {count} images; the {split} split requires at least {min}")]
    ClassTooSmall {
        name: String,
        count: usize,
        split: String,
        min: usize,
    },

    #[error("operation needs at least two classes, corpus has {0}")]
    SingleClass(usize),

    #[error("batch size must be even, got {0}")]
    OddBatchSize(usize),

    #[error("requested {requested} {kind} pairs but only {available} unique combinations exist")]
    PairCapacityExceeded {
        requested: usize,
        available: usize,
        kind: String,
    },

    #[error("unreadable image {0}")]
    CorruptedImage(PathBuf),

    #[error("malformed pair file line {line}: {reason}")]
    PairFileFormat { line: usize, reason: String },

    #[error("checkpoint {path}: bad magic bytes")]
    CheckpointMagic { path: PathBuf },

    #[error("checkpoint {path}: unsupported format version {found} (expected {expected})")]
    CheckpointVersion {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("checkpoint {path}: truncated or corrupt ({reason})")]
    CheckpointTruncated { path: PathBuf, reason: String },

    #[error("checkpoint holds architecture {found}, expected {expected}")]
    ArchMismatch { expected: String, found: String },

    #[error("checkpoint {path} stores {found} tensors, loader expects {expected}")]
    CheckpointDtype {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("non-finite loss {value} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        value: f64,
    },

    #[error("need at least one pair of each label, got {pos} positive and {neg} negative")]
    OneSidedLabels { pos: usize, neg: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("input size mismatch: network built for {expected:?}, batch is {found:?}")]
    InputSizeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
