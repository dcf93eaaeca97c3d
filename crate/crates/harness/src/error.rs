use std::path::Path;

use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] wdlab_core::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}: missing column `{column}`")]
    MissingColumn { file: String, column: String },
    #[error("no runs matched `{0}`")]
    NoRuns(String),
    #[error("{0}")]
    Format(String),
    #[error("reference run `{0}`: {1}")]
    Reference(String, String),
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Stable machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            HarnessError::Core(e) => match e {
                wdlab_core::Error::InvalidConfig(_) => "invalid_config",
                wdlab_core::Error::Divergence(_) | wdlab_core::Error::NonFinite { .. } => "divergence",
                wdlab_core::Error::Parse { .. } => "parse",
                wdlab_core::Error::Io(_) => "io",
                _ => "core",
            },
            HarnessError::Config(_) => "invalid_config",
            HarnessError::Io { .. } => "io",
            HarnessError::MissingColumn { .. } => "missing_column",
            HarnessError::NoRuns(_) => "no_runs",
            HarnessError::Format(_) => "format",
            HarnessError::Reference(..) => "reference",
        }
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Body<'a> {
            kind: &'a str,
            message: String,
        }
        #[derive(Serialize)]
        struct Envelope<'a> {
            error: Body<'a>,
        }
        serde_json::to_string(&Envelope {
            error: Body {
                kind: self.kind(),
                message: self.to_string(),
            },
        })
        .unwrap_or_else(|_| r#"{"error":{"kind":"internal","message":"unserializable error"}}"#.into())
    }
}

impl From<csv::Error> for HarnessError {
    fn from(e: csv::Error) -> Self {
        HarnessError::Format(e.to_string())
    }
}

impl From<serde_json::Error> for HarnessError {
    fn from(e: serde_json::Error) -> Self {
        HarnessError::Format(e.to_string())
    }
}
