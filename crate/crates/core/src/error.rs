use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = GlotError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GlotError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("precondition violated in {op}: {detail}")]
    Precondition { op: &'static str, detail: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("format error in {field}: {detail}")]
    Format { field: String, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl GlotError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        GlotError::Shape { op, detail: detail.into() }
    }

    pub(crate) fn precondition(op: &'static str, detail: impl Into<String>) -> Self {
        GlotError::Precondition { op, detail: detail.into() }
    }

    pub(crate) fn format(field: impl Into<String>, detail: impl Into<String>) -> Self {
        GlotError::Format { field: field.into(), detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GlotError::Io { path: path.into(), source }
    }
}
