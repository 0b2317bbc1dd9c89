use thiserror::Error;

use crate::volume::Modality;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("could not determine the imaging modality of prompt {0:?}")]
    UnresolvedModality(String),

    #[error("no {modality} class matches prompt {sentence:?}")]
    UnresolvedClass { sentence: String, modality: Modality },

    #[error("building class mapping: {0}")]
    MappingBuild(String),

    #[error("segmentation has no foreground voxels")]
    EmptyForeground,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("model parameters: {0}")]
    Model(String),

    #[error("nifti: {0}")]
    Nifti(#[from] nifti::NiftiError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn shape(msg: impl Into<String>) -> Error {
    Error::ShapeMismatch(msg.into())
}
