use thiserror::Error;

pub type Result<T> = std::result::Result<T, LabError>;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("config: {0}")]
    Config(String),
    #[error("config: unknown key '{0}'")]
    UnknownKey(String),
    #[error("config: missing required parameter '{0}'")]
    MissingParam(String),
    #[error("config: '{key}' must be {expected}")]
    TypeMismatch { key: String, expected: &'static str },
    #[error("record is missing column '{0}'")]
    MissingColumn(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("toml: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Core(#[from] reservoir_core::Error),
}

impl LabError {
    /// Whether the failure lies in the configuration rather than the run.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            LabError::Config(_)
                | LabError::UnknownKey(_)
                | LabError::MissingParam(_)
                | LabError::TypeMismatch { .. }
                | LabError::Toml(_)
        )
    }
}
