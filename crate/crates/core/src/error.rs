use thiserror::Error;

use crate::augment::AugmentError;
use crate::detailizer::DetailizerError;
use crate::formats::FormatError;
use crate::grid::GridError;
use crate::guidance::GuidanceError;
use crate::meshio::MeshIoError;
use crate::metrics::MetricError;
use crate::nn::NnError;
use crate::render::RenderError;
use crate::train::TrainError;

/// Union of the module errors, for callers that drive several modules.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Detailizer(#[from] DetailizerError),
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    MeshIo(#[from] MeshIoError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
