use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("hyperedge {edge} has no vertices")]
    EmptyEdge { edge: usize },
    #[error("index {index} out of range for {len} items")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("hyperedge {edge} has non-positive weight {weight}")]
    NonPositiveWeight { edge: usize, weight: f64 },
    #[error("k = {k} requires more than {k} vertices, got {n}")]
    KTooLarge { k: usize, n: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("vertex {vertex} belongs to no hyperedge")]
    IsolatedVertex { vertex: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("memory bank too small: {bank} bank entries + {batch} batch vertices must exceed k = {k}")]
    BankTooSmall { bank: usize, batch: usize, k: usize },
    #[error("image size {size} is below the minimum of {min}")]
    SizeTooSmall { size: usize, min: usize },
    #[error("contrast anomaly needs a non-zero intensity shift")]
    ZeroDelta,
    #[error("no valid anomaly placement inside the foreground after {attempts} attempts")]
    NoValidPlacement { attempts: usize },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest mismatch: {0}")]
    ManifestMismatch(String),
    #[error("corrupt image {}: {reason}", path.display())]
    CorruptImage { path: PathBuf, reason: String },
    #[error("training diverged at epoch {epoch}, step {step}: non-finite or saturated loss")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("training sample {index} is labelled anomalous; training accepts normal samples only")]
    AnomalyLeakage { index: usize },
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: String, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("AUROC needs both classes present")]
    SingleClass,
    #[error("average precision needs at least one positive")]
    NoPositives,
    #[error("best Dice needs at least one non-empty mask")]
    EmptyMasks,
    #[error("config error: {0}")]
    Config(String),
    #[error("conflicting reports for {cell}: config hash {first} vs {second}")]
    ConflictingMetadata { cell: String, first: String, second: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code: 1 for I/O and data problems, 2 for configuration
    /// problems, 3 for numeric divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::ConflictingMetadata { .. } => 2,
            Error::NonFiniteLoss { .. } => 3,
            _ => 1,
        }
    }
}
