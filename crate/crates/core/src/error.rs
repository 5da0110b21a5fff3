use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("missing tensor file {path} for layer {layer}")]
    MissingTensor { layer: String, path: PathBuf },
    #[error("dims mismatch: expected {expected:?}, found {found:?}")]
    DimsMismatch {
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("non-finite value {0}")]
    NonFiniteValue(String),
    #[error("distribution has no positive mass")]
    EmptyDistribution,
    #[error("zero or subnormal input 0x{0:04x} reached the comparator path")]
    ZeroOrSubnormal(u16),
    #[error("histogram has no non-pruned activations")]
    EmptyHistogram,
    #[error("capacity exceeded: {0}")]
    CapacityExceeded(String),
    #[error("unknown weight group {group} in vault {vault}")]
    UnknownGroup { vault: usize, group: usize },
    #[error("slice length {found} does not match exponent {exp} (expected {expected})")]
    SliceLengthMismatch { exp: i8, expected: u8, found: u8 },
    #[error("unknown LUT table id {0:?}")]
    UnknownTableId(String),
    #[error("layer {0} cannot be partitioned into the PE buffers")]
    Unpartitionable(String),
    #[error("buffer overflow: {0}")]
    BufferOverflow(String),
    #[error("reports are not comparable: {0}")]
    MismatchedRuns(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable, machine-readable name of the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parse(_) => "ParseError",
            Error::Shape(_) => "ShapeError",
            Error::MissingTensor { .. } => "MissingTensor",
            Error::DimsMismatch { .. } => "DimsMismatch",
            Error::NonFiniteValue(_) => "NonFiniteValue",
            Error::EmptyDistribution => "EmptyDistribution",
            Error::ZeroOrSubnormal(_) => "ZeroOrSubnormal",
            Error::EmptyHistogram => "EmptyHistogram",
            Error::CapacityExceeded(_) => "CapacityExceeded",
            Error::UnknownGroup { .. } => "UnknownGroup",
            Error::SliceLengthMismatch { .. } => "SliceLengthMismatch",
            Error::UnknownTableId(_) => "UnknownTableId",
            Error::Unpartitionable(_) => "Unpartitionable",
            Error::BufferOverflow(_) => "BufferOverflow",
            Error::MismatchedRuns(_) => "MismatchedRuns",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::Io { .. } => "IoError",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
