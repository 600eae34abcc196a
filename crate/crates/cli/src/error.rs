use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: field `{field}`: {message}")]
    Config { path: PathBuf, field: String, message: String },

    #[error("invalid setting `{field}`: {message}")]
    Invalid { field: String, message: String },

    #[error("{0}")]
    Usage(String),

    /// A verification command found a problem.
    #[error("{0}")]
    Check(String),

    #[error("{context} ({path}): {source}")]
    Io {
        context: String,
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] oxygan::Error),
}

impl CliError {
    pub fn io(context: &str, path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            context: context.to_string(),
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn invalid(field: &str, message: impl Into<String>) -> Self {
        CliError::Invalid {
            field: field.to_string(),
            message: message.into(),
        }
    }

    /// Short category printed in the error line.
    pub fn category(&self) -> &'static str {
        use oxygan::Error as E;
        match self {
            CliError::Config { .. } | CliError::Invalid { .. } => "config",
            CliError::Usage(_) => "usage",
            CliError::Check(_) => "check",
            CliError::Io { .. } => "io",
            CliError::Core(e) => match e {
                E::Config(_) | E::Param(_) => "config",
                E::Shape { .. } | E::Geometry(_) => "shape",
                E::Data(_) => "data",
                E::Format(_) | E::Json { .. } => "format",
                E::Io { .. } => "io",
                E::DegenerateVariance { .. } | E::Train { .. } => "training",
                E::Contract(_) => "internal",
            },
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "usage" | "config" => 2,
            "io" => 3,
            "data" | "format" | "shape" => 4,
            "training" => 5,
            "check" => 6,
            _ => 1,
        }
    }
}
