//! The Deconver segmentation network and its accounting.

pub mod checkpoint;
mod config;
pub mod layers;
mod model;

pub use checkpoint::Checkpoint;
pub use config::{DeconverConfig, Groups, NdcDims, NdcLayerConfig};
pub use layers::{DeconvMixer, DeconverBlock, Layout, Mlp, NdcLayer};
pub use model::{Architecture, Deconver};

use crate::error::Result;

/// Number of learnable scalars of the network described by `config`.
pub fn count_params(config: &DeconverConfig) -> Result<usize> {
    Ok(Architecture::new(config)?.1.count())
}

/// `2 × multiply-accumulates` of one forward pass, per input voxel.
///
/// Only convolutions (including the three correlations of every NDC layer)
/// are counted; normalization and elementwise work are ignored.
pub fn estimate_flops_per_voxel(config: &DeconverConfig) -> Result<f64> {
    Ok(2.0 * Architecture::new(config)?.0.macs_per_voxel())
}
