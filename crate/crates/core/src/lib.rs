//! Multi-step modality fusion network (M2FN) for predicting ad-image
//! click-through rate from images plus auxiliary exposure attributes.
//!
//! The crate bundles everything needed to run the model end to end on a
//! CPU: a small autodiff tensor engine ([`tensor`]), the three fusion blocks
//! ([`fusion`]), the assembled network with its training loop and ablation
//! grid ([`model`]), losses and ranking metrics ([`objectives`],
//! [`metrics`]), the impression-log pipeline ([`data`]), attribute selection
//! statistics ([`stats`]), and a synthetic ad-log generator ([`synth`]).

pub mod cli;
pub mod data;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod stats;
pub mod synth;
pub mod tensor;

use std::path::Path;

use thiserror::Error;

pub use tensor::{Graph, Tensor, TensorError, VarId};

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{layer}: {source}")]
    Layer { layer: String, source: TensorError },
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Stats(#[from] stats::StatsError),
    #[error(transparent)]
    Metric(#[from] metrics::MetricError),
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Extension for tagging tensor errors with the layer that raised them.
pub(crate) trait LayerContext<T> {
    fn layer(self, name: &str) -> Result<T>;
}

impl<T> LayerContext<T> for std::result::Result<T, TensorError> {
    fn layer(self, name: &str) -> Result<T> {
        self.map_err(|source| Error::Layer {
            layer: name.to_string(),
            source,
        })
    }
}
