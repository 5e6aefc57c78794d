use std::path::{Path, PathBuf};

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{}: {msg}", path.display())]
    Annotation { path: PathBuf, msg: String },

    #[error("{}: {source}", path.display())]
    Image { path: PathBuf, source: image::ImageError },

    #[error("{}: {source}", path.display())]
    Json { path: PathBuf, source: serde_json::Error },

    #[error("{0}")]
    Config(String),

    #[error("{0}")]
    Checkpoint(String),

    #[error("missing prerequisite: {0}")]
    Missing(String),

    #[error("{0}")]
    NotFound(String),

    #[error(transparent)]
    Model(#[from] geocontrast_core::Error),
}

impl PipelineError {
    /// Stable machine-readable category for the CLI error line.
    pub fn category(&self) -> &'static str {
        match self {
            PipelineError::Io { .. } => "io",
            PipelineError::Annotation { .. } => "annotation",
            PipelineError::Image { .. } => "image",
            PipelineError::Json { .. } => "json",
            PipelineError::Config(_) => "config",
            PipelineError::Checkpoint(_) => "checkpoint",
            PipelineError::Missing(_) => "missing-prerequisite",
            PipelineError::NotFound(_) => "not-found",
            PipelineError::Model(geocontrast_core::Error::NonFinite { .. }) => "non-finite",
            PipelineError::Model(_) => "model",
        }
    }

    pub fn io(path: impl AsRef<Path>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.as_ref().to_path_buf();
        move |source| PipelineError::Io { path, source }
    }

    pub fn json(path: impl AsRef<Path>) -> impl FnOnce(serde_json::Error) -> Self {
        let path = path.as_ref().to_path_buf();
        move |source| PipelineError::Json { path, source }
    }
}
