use std::path::PathBuf;

use dualhjb_core::config::ConfigError;
use dualhjb_core::io::ArtifactError;
use dualhjb_core::pipeline::PipelineError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    ModelValidation(String),
    #[error("upstream artifact missing: {}", .0.display())]
    UpstreamMissing(PathBuf),
    #[error("artifact: {0}")]
    Artifact(#[from] ArtifactError),
    #[error("numerics: {0}")]
    Numerics(PipelineError),
    #[error("thread pool: {0}")]
    Threads(String),
    #[error("{0} check(s) failed")]
    ChecksFailed(usize),
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(c) => Self::Config(c),
            PipelineError::ModelValidation(m) => {
                Self::ModelValidation(format!("model validation failed: {m}"))
            }
            other => Self::Numerics(other),
        }
    }
}

impl CliError {
    /// Process exit status, fixed per error class.
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::ChecksFailed(_) => 1,
            Self::Config(_) => 3,
            Self::ModelValidation(_) => 4,
            Self::UpstreamMissing(_) => 5,
            Self::Artifact(_) => 6,
            Self::Numerics(_) => 7,
            Self::Threads(_) => 8,
        }
    }
}
