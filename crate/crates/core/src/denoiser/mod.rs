//! The latent denoiser: a small text-conditioned U-Net whose spatial layers
//! process frames independently, with an optional temporal block inserted
//! after every spatial layer for clip-level modelling.

mod temporal;
mod unet;
mod video;

pub use temporal::{sinusoidal_table, TemporalBlock, TemporalBlockConfig};
pub use unet::{is_temporal_param, timestep_embedding, Denoiser, FreezeReport};
pub use video::{ClipDims, Layout, VideoTensor};

use serde::{Deserialize, Serialize};

use crate::diffusion::Parameterization;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenoiseMode {
    /// Temporal blocks and the class embedding are bypassed.
    SpatialOnly,
    Spatiotemporal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    /// Channel width per resolution level, finest first.
    pub widths: Vec<usize>,
    pub text_dim: usize,
    pub vocab_size: usize,
    pub max_tokens: usize,
    pub num_classes: usize,
    /// Length of the positional table, i.e. the longest clip.
    pub frames: usize,
    pub temporal_heads: usize,
    pub mlp_ratio: usize,
    pub positional_encoding: bool,
    pub parameterization: Parameterization,
    pub max_groups: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            widths: vec![32, 64, 128],
            text_dim: 32,
            vocab_size: 64,
            max_tokens: 16,
            num_classes: 3,
            frames: 16,
            temporal_heads: 1,
            mlp_ratio: 4,
            positional_encoding: true,
            parameterization: Parameterization::Velocity,
            max_groups: 8,
        }
    }
}

impl DenoiserConfig {
    /// Spatial layers (one residual block + cross-attention each): one per
    /// level on the way down and one per level but the coarsest on the way
    /// up.
    pub fn spatial_layer_count(&self) -> usize {
        2 * self.widths.len() - 1
    }

    /// Temporal blocks sit after each spatial layer.
    pub fn temporal_block_count(&self) -> usize {
        self.spatial_layer_count()
    }

    /// Spatial size must be divisible by this.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.widths.len() - 1)
    }

    pub fn time_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn embed_dim(&self) -> usize {
        self.widths[0] * 4
    }
}
