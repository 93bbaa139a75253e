use std::path::PathBuf;

use thiserror::Error;

/// Errors raised while validating a [`ModelConfig`](crate::config::ModelConfig)
/// or loading a config file.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("roi_size {roi} exceeds the smallest image side {min_side}")]
    RoiTooLarge { roi: usize, min_side: usize },
    #[error("base_channels {0} is not divisible by 4")]
    BadChannels(usize),
    #[error("{field} is fixed at {expected}, got {got}")]
    FixedField {
        field: &'static str,
        expected: String,
        got: String,
    },
    #[error("invalid value for {field}: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("cannot parse config: {0}")]
    Parse(String),
}

/// Dataset loading failures.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("no {kind} mask for sample {id} (expected {path})")]
    MissingMask {
        id: String,
        kind: &'static str,
        path: PathBuf,
    },
    #[error("sample {id}: {what} is {got:?}, image is {expected:?}")]
    ShapeMismatch {
        id: String,
        what: &'static str,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("unknown split {0:?}")]
    UnknownSplit(String),
    #[error("unknown field {0:?} (expected 3M or 6M)")]
    UnknownField(String),
    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        source: image::ImageError,
    },
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Shape and arity violations inside individual blocks.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum BlockError {
    #[error("channel count {channels} is smaller than the reduction {reduction}")]
    ChannelTooSmall { channels: usize, reduction: usize },
    #[error("ghost module needs an even channel count, got {0}")]
    OddChannels(usize),
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("diagonal attention needs a square map, got {h}x{w}")]
    NonSquareInput { h: usize, w: usize },
    #[error("expected a rank-4 feature map, got dims {0:?}")]
    NotRank4(Vec<usize>),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Block(#[from] BlockError),
    #[error("cannot aggregate an empty set of values")]
    EmptySet,
    #[error("csv error: {0}")]
    Csv(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
