use std::path::{Path, PathBuf};

use thiserror::Error;

/// Checkpoint load failures, each with its own exit code.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: not a checkpoint (bad magic)")]
    Magic { path: PathBuf },
    #[error("{path}: CRC mismatch (stored {stored:08x}, computed {computed:08x})")]
    Crc {
        path: PathBuf,
        stored: u32,
        computed: u32,
    },
    #[error("{path}: format version {found} is not supported (expected {expected})")]
    Version {
        path: PathBuf,
        found: u16,
        expected: u16,
    },
    #[error("{path}: model configuration digest does not match")]
    Digest { path: PathBuf },
    #[error("{path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] fedseg::Error),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {reason}")]
    Config { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Table { path: PathBuf, reason: String },
    #[error("{0} is locked by another run")]
    Locked(PathBuf),
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<CliError>,
    },
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn table(path: impl AsRef<Path>, reason: impl ToString) -> Self {
        CliError::Table {
            path: path.as_ref().to_path_buf(),
            reason: reason.to_string(),
        }
    }

    /// Process exit code.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Stage { source, .. } => source.exit_code(),
            CliError::Config { .. } => 2,
            CliError::Checkpoint(c) => match c {
                CheckpointError::Crc { .. } => 10,
                CheckpointError::Version { .. } => 11,
                CheckpointError::Digest { .. } => 12,
                CheckpointError::Magic { .. } => 13,
                CheckpointError::Malformed { .. } => 14,
            },
            CliError::Io { .. } => 3,
            CliError::Table { .. } => 4,
            CliError::Locked(_) => 5,
            CliError::Core(fedseg::Error::Config(_)) => 2,
            CliError::Core(_) => 1,
        }
    }
}

/// Tags errors with the pipeline stage they came from.
pub trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T, E: Into<CliError>> StageExt<T> for std::result::Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| CliError::Stage {
            stage,
            source: Box::new(e.into()),
        })
    }
}
