//! Crate-wide error type.

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid range: {0}")]
    InvalidRange(String),

    #[error("step index {index} out of range for {len} steps")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("unknown class {class} for mixture with {num_classes} classes")]
    UnknownClass { class: usize, num_classes: usize },

    #[error("invalid time: {0}")]
    InvalidTime(String),

    #[error("process mismatch: {0}")]
    ProcessMismatch(String),

    #[error("flow time {0} is an interpolant endpoint")]
    EndpointTime(f64),

    #[error("fixed-point iteration diverged at w = {w}")]
    Divergence { w: f64 },

    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    #[error("empty sample set")]
    EmptySet,

    #[error("trajectory too short: {0} points (need at least 3)")]
    TooShortTrajectory(usize),

    #[error("non-finite metric value: {0}")]
    NonFiniteMetric(f64),

    #[error("checkpoint checksum mismatch")]
    ChecksumMismatch,

    #[error("checkpoint format version {found} unsupported (this build reads version {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("training loss became non-finite at step {step}")]
    NumericDivergence { step: u64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
