use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unsupported PEFT site: {0}")]
    UnsupportedSite(String),

    #[error("infeasible plan: {0}")]
    Infeasible(String),

    #[error("{0} has already been applied to this model")]
    AlreadyApplied(&'static str),

    #[error("numeric failure at epoch {epoch}, step {step}: {detail}")]
    Numeric {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("degenerate intensity range: ground truth is constant")]
    DegenerateRange,

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("corrupt volume header: {0}")]
    CorruptHeader(String),

    #[error("truncated payload: {0} trailing bytes do not form a whole scalar")]
    TruncatedPayload(usize),

    #[error("payload holds {found} scalars but header dims {dims:?} require {expected}")]
    PayloadMismatch {
        dims: Vec<usize>,
        expected: usize,
        found: usize,
    },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint architecture does not match: {0}")]
    ArchMismatch(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shapes(what: &str, a: &[usize], b: &[usize]) -> Self {
        Error::Shape(format!("{what}: {a:?} vs {b:?}"))
    }
}
