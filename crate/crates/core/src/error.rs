use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("region index out of range: {region} contains {index} but the mesh has {vertices} vertices")]
    RegionIndexOutOfRange {
        region: String,
        index: usize,
        vertices: usize,
    },
    #[error("missing region {0:?}")]
    MissingRegion(String),
    #[error("invalid region {region:?}: {reason}")]
    InvalidRegion { region: String, reason: String },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unsupported audio: {0}")]
    UnsupportedAudio(String),
    #[error("empty audio")]
    EmptyAudio,
    #[error("audio too short: {samples} samples, need at least {required}")]
    AudioTooShort { samples: usize, required: usize },
    #[error("invalid vocabulary: {0}")]
    Vocabulary(String),
    #[error("symbol {0:?} is not in the vocabulary")]
    UnknownSymbol(char),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("speech recognizer backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Malformed {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
