use std::path::{Path, PathBuf};

use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    /// A required input (dataset, checkpoint) is missing or unusable.
    #[error("missing dependency {what} at {path}")]
    Dependency { what: String, path: PathBuf },
    #[error("window {window} exceeds trajectory length {n_time}")]
    InvalidWindow { window: usize, n_time: usize },
    #[error("no state pairs available: {0}")]
    NoPairsAvailable(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed json at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error(transparent)]
    Core(#[from] aroma_core::Error),
}

pub type LabResult<T> = Result<T, LabError>;

impl LabError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn json(path: impl AsRef<Path>, source: serde_json::Error) -> Self {
        LabError::Json {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn dependency(what: impl Into<String>, path: impl AsRef<Path>) -> Self {
        LabError::Dependency {
            what: what.into(),
            path: path.as_ref().to_path_buf(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LabError::Dependency { .. } => "DependencyError",
            LabError::InvalidWindow { .. } => "InvalidWindow",
            LabError::NoPairsAvailable(_) => "NoPairsAvailable",
            LabError::Io { .. } => "IoError",
            LabError::Json { .. } => "JsonError",
            LabError::Format(_) => "FormatError",
            LabError::Config(_) => "ConfigError",
            LabError::Diverged(_) => "TrainingDiverged",
            LabError::Core(e) => match e {
                aroma_core::Error::Domain { .. } => "DomainError",
                aroma_core::Error::EmptyObservationSet => "EmptyObservationSet",
                aroma_core::Error::InvalidRatio(_) => "InvalidRatio",
                aroma_core::Error::EncoderNumerical => "EncoderNumericalError",
                aroma_core::Error::RefinerNumerical => "RefinerNumericalError",
                aroma_core::Error::InvalidSchedule(_) => "InvalidSchedule",
                aroma_core::Error::SolverDiverged { .. } => "SolverDiverged",
                aroma_core::Error::GridTooSparse { .. } => "GridTooSparse",
                aroma_core::Error::Config(_) => "ConfigError",
                aroma_core::Error::Shape(_) => "ShapeError",
            },
        }
    }

    /// Machine-readable form printed on failure.
    pub fn payload(&self) -> serde_json::Value {
        let mut v = json!({ "error": self.kind(), "message": self.to_string() });
        match self {
            LabError::Dependency { what, path } => {
                v["dependency"] = json!(what);
                v["path"] = json!(path);
            }
            LabError::Io { path, .. } | LabError::Json { path, .. } => v["path"] = json!(path),
            _ => {}
        }
        v
    }
}

/// Best-effort mapping of an `anyhow` chain back to a payload.
pub fn payload_of(err: &anyhow::Error) -> serde_json::Value {
    match err.downcast_ref::<LabError>() {
        Some(e) => {
            let mut v = e.payload();
            v["message"] = json!(format!("{err:#}"));
            v
        }
        None => json!({ "error": "Error", "message": format!("{err:#}") }),
    }
}
