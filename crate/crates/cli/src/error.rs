use std::path::Path;

use thiserror::Error;

use rlab_core::agent::AgentError;
use rlab_core::dataset::DatasetError;
use rlab_core::engine::EngineError;
use rlab_core::io::FormatError;
use rlab_core::metrics::MetricsError;
use rlab_core::target::TargetError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("target unreachable: {0}")]
    Unreachable(String),
    /// Anything the victim or engine reported mid-run.
    #[error("{0}")]
    Run(String),
}

impl CliError {
    pub fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        Self::Io(format!("{}: {err}", path.display()))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 1,
            Self::Io(_) => 2,
            Self::Unreachable(_) => 3,
            Self::Run(_) => 5,
        }
    }
}

impl From<TargetError> for CliError {
    fn from(e: TargetError) -> Self {
        match e {
            TargetError::Transport(_) => Self::Unreachable(e.to_string()),
            TargetError::Format(f) => f.into(),
            TargetError::ShapeMismatch { .. }
            | TargetError::LabelOutOfRange { .. }
            | TargetError::InvalidModel(_) => Self::Config(e.to_string()),
            _ => Self::Run(e.to_string()),
        }
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        Self::Io(e.to_string())
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Labels { .. } | DatasetError::Empty(_) => Self::Config(e.to_string()),
            _ => Self::Io(e.to_string()),
        }
    }
}

impl From<AgentError> for CliError {
    fn from(e: AgentError) -> Self {
        match e {
            AgentError::Format(f) => f.into(),
            other => Self::Config(other.to_string()),
        }
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Target(t) => t.into(),
            EngineError::Agent(a) => a.into(),
            EngineError::InvalidConfig(_)
            | EngineError::ClassOutOfRange { .. }
            | EngineError::Image(_) => Self::Config(e.to_string()),
            EngineError::Io(_) => Self::Io(e.to_string()),
            other => Self::Run(other.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Empty => Self::Run(e.to_string()),
            other => Self::Config(other.to_string()),
        }
    }
}
