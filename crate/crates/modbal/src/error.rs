use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: unsupported shape {shape:?}")]
    BadShape { op: &'static str, shape: Vec<usize> },

    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("loss tensor was not recorded on this tape")]
    LossNotOnTape,

    #[error("pearson needs equal lengths >= 2, got {lhs} and {rhs}")]
    PearsonLength { lhs: usize, rhs: usize },

    #[error("profit needs batch >= 2, got {batch}")]
    ProfitBatch { batch: usize },

    #[error("unknown fusion kind `{0}`")]
    UnknownFusion(String),

    #[error("{what} shape mismatch for parameter `{path}`: expected {expected:?}, got {got:?}")]
    ParamShapeMismatch {
        what: &'static str,
        path: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("FIM estimation needs at least one sample")]
    EmptyFimSample,

    #[error("invalid data config: {0}")]
    InvalidDataConfig(String),

    #[error("batch_size must be >= 2, got {0}")]
    BatchSizeTooSmall(usize),

    #[error("config error: {0}")]
    Config(String),

    #[error("NaN loss at epoch {epoch}, batch {batch}; first NaN produced by op `{op}`")]
    NanLoss {
        epoch: usize,
        batch: usize,
        op: String,
    },

    #[error("{path}: bad magic, not a {expected} file")]
    BadMagic { path: String, expected: &'static str },

    #[error("{path}: format version {found} is newer than supported version {supported}")]
    VersionMismatch {
        path: String,
        found: u32,
        supported: u32,
    },

    #[error("{path}: checksum mismatch, file is corrupted")]
    ChecksumMismatch { path: String },

    #[error("{path}: truncated or malformed file ({detail})")]
    MalformedFile { path: String, detail: String },

    #[error("refusing to overwrite `{0}` (pass --force-overwrite)")]
    WouldClobber(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
