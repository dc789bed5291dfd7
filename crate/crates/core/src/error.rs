use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("parameter `{path}` has no gradient")]
    MissingGradient { path: String },

    #[error("duplicate parameter path `{path}`")]
    DuplicateParam { path: String },

    #[error("unknown parameter path `{path}`")]
    UnknownParam { path: String },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("checkpoint {}: {detail}", path.display())]
    Checkpoint { path: PathBuf, detail: String },

    #[error("config: {0}")]
    Config(String),

    #[error("step {step}, stage `{stage}`: {source}")]
    Stage {
        step: usize,
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps a module-level failure with the trainer step and stage that hit it.
    pub fn at_stage(self, step: usize, stage: &'static str) -> Self {
        Error::Stage {
            step,
            stage,
            source: Box::new(self),
        }
    }
}
