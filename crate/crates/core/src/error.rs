use std::path::PathBuf;

use thiserror::Error;

use crate::injection::FeatureKey;

/// Failures raised by the dense kernels in [`crate::tensor`].
#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("{op}: non-finite value in input")]
    NonFinite { op: &'static str },
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: invalid configuration ({detail})")]
    Config { op: &'static str, detail: String },
}

/// Decode/encode failures for the on-disk tensor and frame formats.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormatError {
    #[error("bad magic bytes {0:?}, expected \"AV2V\"")]
    BadMagic([u8; 4]),
    #[error("unsupported tensor format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated tensor file: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("{0} trailing bytes after tensor payload")]
    TrailingBytes(usize),
    #[error("invalid tensor dims {0:?}")]
    BadDims(Vec<u64>),
    #[error("pixmap {path}: {detail}")]
    Pixmap { path: PathBuf, detail: String },
    #[error("frame geometry: {0}")]
    Geometry(String),
    #[error("no frame_*.ppm files in {0}")]
    EmptyDirectory(PathBuf),
    #[error("latent has {actual} channels, codec expects {expected}")]
    ChannelMismatch { expected: usize, actual: usize },
}

/// Feature cache bookkeeping failures.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum CacheError {
    #[error("duplicate cache entry {0}")]
    Duplicate(FeatureKey),
    #[error("cache miss at planned site {0}: record and edit plans disagree")]
    Miss(FeatureKey),
    #[error("feature cache is already populated")]
    AlreadyPopulated,
    #[error("feature cache was recorded under a different injection plan")]
    PlanMismatch,
    #[error("cached feature {key} has dims {cached:?}, site expects {site:?}")]
    ShapeMismatch {
        key: FeatureKey,
        cached: Vec<usize>,
        site: Vec<usize>,
    },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("plan error: {0}")]
    Plan(String),
    #[error("step order error: cannot move from timestep {from} to {to}")]
    StepOrder { from: i64, to: i64 },
    #[error("conditioning error: {0}")]
    Conditioning(String),
    #[error("latent diverged (non-finite values) at step {step}")]
    Divergence { step: usize },
    #[error("metric error: {0}")]
    Metric(String),
    #[error("pipeline error: {0}")]
    Pipeline(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (flags, config keys, plans).
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Plan(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
