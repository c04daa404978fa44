use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] rtcan_tensor::TensorError),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("manifest parse error: {0}")]
    ManifestParse(String),
    #[error("manifest record {index}: {msg}")]
    ManifestRecord { index: usize, msg: String },
    #[error("sample `{id}`: missing file {path}")]
    MissingFile { id: String, path: PathBuf },
    #[error("unknown sample id `{0}`")]
    UnknownId(String),
    #[error("sample `{id}`: images are not aligned ({detail})")]
    Alignment { id: String, detail: String },
    #[error("sample `{id}`: mask is not binary (found value {value})")]
    NonBinaryMask { id: String, value: u8 },
    #[error("split error: {0}")]
    Split(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch:?}")]
    NonFiniteLoss { epoch: usize, batch: Vec<String> },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("checkpoint architecture mismatch: {0}")]
    ArchitectureMismatch(String),
    #[error("metrics error: {0}")]
    Metrics(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}

pub(crate) fn image_err(path: impl Into<PathBuf>) -> impl FnOnce(image::ImageError) -> Error {
    let path = path.into();
    move |source| Error::Image { path, source }
}
