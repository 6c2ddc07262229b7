use std::path::Path;

use pathonet::annotation::AnnotationError;
use pathonet::config::ConfigError;
use pathonet::density::DensityError;
use pathonet::evaluate::EvalError;
use pathonet::labelgen::LabelError;
use pathonet::model::ModelError;
use pathonet::postprocess::PostprocessError;
use pathonet::synth::SynthError;

/// Every failure maps to one diagnostic line and one exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Config(_) => 3,
            CliError::Io { .. } => 4,
            CliError::Data(_) => 1,
        }
    }

    pub fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            message: err.to_string(),
        }
    }
}

impl From<AnnotationError> for CliError {
    fn from(e: AnnotationError) -> Self {
        match e {
            AnnotationError::Io { path, source } => CliError::Io {
                path,
                message: source.to_string(),
            },
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<DensityError> for CliError {
    fn from(e: DensityError) -> Self {
        match e {
            DensityError::Io { path, source } => CliError::Io {
                path,
                message: source.to_string(),
            },
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io { path, source } => CliError::Io {
                path,
                message: source.to_string(),
            },
            e => CliError::Data(e.to_string()),
        }
    }
}

macro_rules! data_error {
    ($($t:ty),*) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Data(e.to_string())
            }
        })*
    };
}

data_error!(EvalError, LabelError, PostprocessError, SynthError);
