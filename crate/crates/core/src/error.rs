use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the label-noise pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("resource error: {0}")]
    Resource(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("not enough anchor points for {row}: {detail}")]
    AnchorShortage { row: String, detail: String },

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Divergence {
        epoch: usize,
        /// Last parameters (or bundle) that produced a finite objective.
        last_stable: Box<Checkpoint>,
    },

    #[error("missing upstream artifact `{}`", .0.display())]
    Dependency(PathBuf),

    #[error("I/O error on `{}`: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed artifact `{}`: {detail}", path.display())]
    Format { path: PathBuf, detail: String },
}

/// Payload carried by [`Error::Divergence`].
#[allow(clippy::large_enum_variant)] // always boxed inside the error
#[derive(Debug, Clone)]
pub enum Checkpoint {
    Params(crate::netcore::ClassifierParams),
    Revision {
        params: crate::netcore::ClassifierParams,
        bundle: crate::transition::TransitionBundle,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl ToString) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.to_string(),
        }
    }
}
