//! CLI error taxonomy mapped to distinct exit codes: 3 for missing files
//! and other I/O failures, 4 for schema violations in input files, 5 for
//! domain precondition failures. (clap itself exits with 2 on usage
//! errors.)

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Schema { path: String, message: String },
    #[error("{0}")]
    Domain(String),
}

impl CliError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io { context: context.into(), source }
    }

    pub fn schema(path: &Path, message: impl std::fmt::Display) -> Self {
        CliError::Schema { path: path.display().to_string(), message: message.to_string() }
    }

    pub fn domain(message: impl std::fmt::Display) -> Self {
        CliError::Domain(message.to_string())
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Io { .. } => "io",
            CliError::Schema { .. } => "schema",
            CliError::Domain(_) => "domain",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io { .. } => 3,
            CliError::Schema { .. } => 4,
            CliError::Domain(_) => 5,
        }
    }
}

macro_rules! domain_from {
    ($($source:ty),* $(,)?) => {
        $(impl From<$source> for CliError {
            fn from(e: $source) -> Self {
                CliError::Domain(e.to_string())
            }
        })*
    };
}

domain_from!(
    gleason_core::model::ModelError,
    gleason_core::stage1::Stage1Error,
    gleason_core::stage2::Stage2Error,
    gleason_core::sampler::SamplerError,
    gleason_core::finegrained::FineGrainedError,
    gleason_core::metrics::MetricsError,
    gleason_core::survival::SurvivalError,
);

pub type Result<T> = std::result::Result<T, CliError>;
