use petite_core::Error as CoreError;

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;
pub const EXIT_PARTIAL: u8 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Core(#[from] CoreError),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{failed} of {total} gradient checks failed")]
    Gradcheck { failed: usize, total: usize },

    #[error("{failed} of {total} sweep arms failed")]
    PartialSweep { failed: usize, total: usize },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Gradcheck { .. } => EXIT_NUMERIC,
            CliError::PartialSweep { .. } => EXIT_PARTIAL,
            CliError::Core(e) => match e {
                CoreError::Numeric { .. } => EXIT_NUMERIC,
                CoreError::Config(_)
                | CoreError::Infeasible(_)
                | CoreError::UnsupportedSite(_)
                | CoreError::AlreadyApplied(_)
                | CoreError::ArchMismatch(_)
                | CoreError::VersionMismatch { .. }
                | CoreError::CorruptCheckpoint(_)
                | CoreError::CorruptHeader(_)
                | CoreError::TruncatedPayload(_)
                | CoreError::PayloadMismatch { .. }
                | CoreError::EmptyDataset
                | CoreError::Io { .. } => EXIT_CONFIG,
                _ => EXIT_FAILURE,
            },
        }
    }
}
