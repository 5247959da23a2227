use thiserror::Error;

/// Errors raised by the engine, the synthetic generator and the file readers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("class count mismatch: expected {expected}, got {actual}")]
    KMismatch { expected: usize, actual: usize },

    #[error("proposal {proposal} of image `{image_id}` has no box in detection mode")]
    MissingBox { image_id: String, proposal: usize },

    #[error("recognition image `{image_id}` has {count} proposals, expected exactly 1")]
    ProposalCount { image_id: String, count: usize },

    #[error("cache entry {index} has no scale in detection mode")]
    MissingScale { index: usize },

    #[error("feature norm {norm} is outside the accepted tolerance")]
    NotNormalized { norm: f64 },

    #[error("invalid class distribution: {reason}")]
    BadDistribution { reason: String },

    #[error("invalid box: {reason}")]
    BadBox { reason: String },

    #[error("the cache is empty")]
    EmptyCache,

    #[error("cache index {index} out of range (M = {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("invalid shift spec: {0}")]
    BadShiftSpec(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("proposal {proposal} of image `{image_id}` has no ground truth label")]
    MissingGroundTruth { image_id: String, proposal: usize },

    #[error("bad segment range {start}..{end}: {reason}")]
    BadRange {
        start: f64,
        end: f64,
        reason: String,
    },

    #[error("schema error at line {line}: {message}")]
    Schema { line: usize, message: String },

    #[error("unsupported format version {found} (reader supports {supported})")]
    VersionMismatch { found: u32, supported: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn schema(line: usize, message: impl Into<String>) -> Self {
        Error::Schema {
            line,
            message: message.into(),
        }
    }

    /// True for errors caused by malformed input files.
    pub fn is_schema(&self) -> bool {
        matches!(
            self,
            Error::Schema { .. }
                | Error::VersionMismatch { .. }
                | Error::DimensionMismatch { .. }
                | Error::KMismatch { .. }
                | Error::MissingBox { .. }
                | Error::ProposalCount { .. }
                | Error::NotNormalized { .. }
                | Error::BadDistribution { .. }
                | Error::BadBox { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
