use oncotwin_core::TwinError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AppError {
    #[error("cannot read config {path}: {reason}")]
    MissingConfig { path: String, reason: String },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("artifact {path} was produced by config {found}, current config is {expected}\n{diff}")]
    ConfigMismatch {
        path: String,
        expected: String,
        found: String,
        diff: String,
    },
    #[error("missing artifact {path}; run `{stage}` first")]
    MissingArtifact { path: String, stage: &'static str },
    #[error("unknown patient {0}")]
    UnknownPatient(String),
    #[error(transparent)]
    Model(#[from] TwinError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

impl AppError {
    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::MissingConfig { .. } | Self::InvalidConfig(_) => 2,
            Self::ConfigMismatch { .. } => 3,
            Self::MissingArtifact { .. } | Self::UnknownPatient(_) => 4,
            Self::Model(_) => 5,
            Self::Io { .. } | Self::Json { .. } => 6,
        }
    }
}

pub type AppResult<T> = std::result::Result<T, AppError>;
