use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate projection for detection {index} (scene {scene}, frame {frame}, agent {agent})")]
    DegenerateProjection {
        index: usize,
        scene: String,
        frame: i64,
        agent: i64,
    },

    #[error("scene {scene} has only {groups} window-groups; at least 3 are needed to split")]
    Split { scene: String, groups: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("archive error: {0}")]
    Archive(String),

    #[error("image error: {0}")]
    Image(String),

    #[error("no trained map for scene {0}")]
    MissingMap(String),

    #[error("training diverged at batch {batch}: non-finite {component}")]
    Divergence { batch: usize, component: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e.to_string())
    }
}
