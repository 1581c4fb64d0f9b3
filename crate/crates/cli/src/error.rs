use pathmoe_core::CoreError;

/// Process exit statuses.
pub mod exit {
    pub const OK: u8 = 0;
    pub const VERIFICATION: u8 = 1;
    pub const IO: u8 = 2;
    pub const FORMAT: u8 = 3;
    pub const DIVERGENCE: u8 = 4;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Verification(_) => exit::VERIFICATION,
            CliError::Usage(_) => exit::IO,
            CliError::Core(e) => match e {
                CoreError::Io { .. }
                | CoreError::Config(_)
                | CoreError::EmptySplit
                | CoreError::Invalid(_) => exit::IO,
                CoreError::Parse { .. }
                | CoreError::UnknownEntity { .. }
                | CoreError::AlreadyAugmented
                | CoreError::Format(_)
                | CoreError::ShapeMismatch(_)
                | CoreError::Autodiff(_) => exit::FORMAT,
                CoreError::Divergence { .. } => exit::DIVERGENCE,
            },
        }
    }
}

impl From<pathmoe_autodiff::AutodiffError> for CliError {
    fn from(e: pathmoe_autodiff::AutodiffError) -> Self {
        CliError::Core(e.into())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
