use std::path::PathBuf;

use thiserror::Error;

/// Failure classes, each with its own exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Dataset(vitforge_core::Error),

    #[error("checkpoint error: {0}")]
    Checkpoint(vitforge_core::Error),

    #[error("run failed: {0}")]
    Run(vitforge_core::Error),

    #[error("cannot write {}: {source}", path.display())]
    Output {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("check failed: {0}")]
    Check(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Dataset(_) => 3,
            Self::Checkpoint(_) => 4,
            Self::Run(_) => 5,
            Self::Output { .. } => 6,
            Self::Check(_) => 7,
        }
    }

    /// The message without the class prefix.
    pub fn message(&self) -> String {
        match self {
            Self::Config(m) | Self::Check(m) => m.clone(),
            Self::Dataset(e) | Self::Checkpoint(e) | Self::Run(e) => e.to_string(),
            Self::Output { .. } => self.to_string(),
        }
    }

    pub(crate) fn output(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Output {
            path: path.into(),
            source,
        }
    }
}
