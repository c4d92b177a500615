//! Self-supervised monocular depth estimation with a graph-convolutional
//! decoder.
//!
//! Two networks are trained jointly from monocular video: a depth
//! auto-encoder whose decoder runs graph convolutions over pixel-grid graphs
//! at four scales, and a 6-DoF ego-motion regressor. Differentiable view
//! synthesis turns predicted depth and pose into a reconstruction of the
//! target frame, and photometric + smoothness losses drive the optimization.
//! Depth evaluation follows the standard metric suite with median scaling.

pub mod autodiff;
pub mod cli;
pub mod nn;
pub mod config;
pub mod data;
pub mod depthnet;
pub mod geometry;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod params;
pub mod posenet;
pub mod trainer;
pub mod viz;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
