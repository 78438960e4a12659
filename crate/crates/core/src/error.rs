use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("gaussian lies behind the near plane (depth {depth:.4} m)")]
    BehindCamera { depth: f64 },

    #[error("invalid depth {0}")]
    InvalidDepth(f64),

    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),

    #[error("render context is stale: the map changed since the forward pass")]
    StaleContext,

    #[error("degenerate depth alignment: {0}")]
    DegenerateFit(String),

    #[error("no pixel qualifies for gaussian insertion")]
    EmptyFrame,

    #[error("tracking diverged (initial loss {initial:.6}, final loss {last:.6})")]
    TrackingDiverged { initial: f64, last: f64 },

    #[error("map corrupted: {0} gaussians with non-finite parameters")]
    MapCorrupted(usize),

    #[error("residual histogram has zero total mass")]
    EmptyHistogram,

    #[error("missing index file {0}")]
    MissingIndex(PathBuf),

    #[error("sequence {0} contains no usable frames")]
    EmptySequence(PathBuf),

    #[error("{path}:{line}: malformed line: {reason}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("size mismatch for {what}: expected {expected:?}, found {found:?}")]
    SizeMismatch {
        what: String,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("only {found} trajectory pairs matched, at least {required} required")]
    TooFewMatches { found: usize, required: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: ::image::ImageError,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable name used in structured error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::BehindCamera { .. } => "BehindCamera",
            Error::InvalidDepth(_) => "InvalidDepth",
            Error::InvalidIntrinsics(_) => "InvalidIntrinsics",
            Error::StaleContext => "StaleContext",
            Error::DegenerateFit(_) => "DegenerateFit",
            Error::EmptyFrame => "EmptyFrame",
            Error::TrackingDiverged { .. } => "TrackingDiverged",
            Error::MapCorrupted(_) => "MapCorrupted",
            Error::EmptyHistogram => "EmptyHistogram",
            Error::MissingIndex(_) => "MissingIndex",
            Error::EmptySequence(_) => "EmptySequence",
            Error::MalformedLine { .. } => "MalformedLine",
            Error::SizeMismatch { .. } => "SizeMismatch",
            Error::TooFewMatches { .. } => "TooFewMatches",
            Error::Config(_) => "Config",
            Error::Io { .. } => "Io",
            Error::Image { .. } => "Image",
        }
    }
}
