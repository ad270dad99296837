use std::fmt;
use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Where inside an input file a parse problem was found.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Location {
    Byte(u64),
    Line(u64),
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Location::Byte(b) => write!(f, "byte {b}"),
            Location::Line(l) => write!(f, "line {l}"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("malformed header at {location}: {reason}")]
    MalformedHeader { location: Location, reason: String },

    #[error("{location}: expected {expected} activation values, found {found}")]
    RowWidth {
        location: Location,
        expected: usize,
        found: usize,
    },

    #[error("non-finite activation value at {location}")]
    NonFinite { location: Location },

    #[error("malformed value at {location}: {reason}")]
    MalformedValue { location: Location, reason: String },

    #[error("unexpected end of data at {location}")]
    Truncated { location: Location },

    #[error("trailing data after last record at {location}")]
    TrailingData { location: Location },

    #[error("duplicate sample id {0}")]
    DuplicateSampleId(u64),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("need at least {required} samples, got {found}")]
    TooFewSamples { required: usize, found: usize },

    #[error("split index {split_index} out of range for {len} records")]
    SplitOutOfRange { split_index: usize, len: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("per-class mode needs a class label on every record (sample {sample_id} has none)")]
    MissingLabels { sample_id: u64 },

    #[error("per-class abstraction requires a class label")]
    MissingClassLabel,

    #[error("unknown class {0}")]
    UnknownClass(u32),

    #[error("class {class} has {count} samples, at least 2 are required")]
    ClassTooSmall { class: u32, count: usize },

    #[error("sample id {0} appears in both the proper and calibration sets")]
    OverlappingSamples(u64),

    #[error("unsupported schema version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("invalid artifact: {0}")]
    InvalidArtifact(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
