use alloc::format;

use crate::error::{Error, Result};
use crate::frontend::CNN_LAYERS;

/// Network hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ModelConfig {
    /// Number of conformer blocks (and attractor decoders).
    pub depth: usize,
    pub embed_dim: usize,
    pub latte_dim: usize,
    pub n_latents: usize,
    /// Attractor slots.
    pub n_attractors: usize,
    pub ff_expansion: usize,
    pub conv_kernel: usize,
    pub heads: usize,
    /// Output channels of the first four CNN layers; the fifth outputs
    /// `embed_dim`.
    pub cnn_channels: [usize; CNN_LAYERS - 1],
    /// Hidden width of the depth-pooling score MLP.
    pub sap_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 5,
            embed_dim: 256,
            latte_dim: 128,
            n_latents: 16,
            n_attractors: 8,
            ff_expansion: 4,
            conv_kernel: 9,
            heads: 4,
            cnn_channels: [16, 32, 64, 128],
            sap_hidden: 64,
        }
    }
}

impl ModelConfig {
    /// Small configuration that trains on a single CPU core in minutes.
    pub fn desk() -> Self {
        Self {
            depth: 2,
            embed_dim: 32,
            latte_dim: 16,
            n_latents: 8,
            n_attractors: 4,
            ff_expansion: 2,
            conv_kernel: 9,
            heads: 2,
            cnn_channels: [8, 16, 16, 32],
            sap_hidden: 16,
        }
    }

    pub fn cnn_channels_full(&self) -> [usize; CNN_LAYERS] {
        let c = self.cnn_channels;
        [c[0], c[1], c[2], c[3], self.embed_dim]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.depth == 0 || self.embed_dim == 0 || self.latte_dim == 0 || self.n_latents == 0 {
            return bad("depth, embed_dim, latte_dim and n_latents must be positive");
        }
        if self.n_attractors == 0 || self.ff_expansion == 0 || self.sap_hidden == 0 {
            return bad("n_attractors, ff_expansion and sap_hidden must be positive");
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) || !self.latte_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embed_dim {} and latte_dim {} must both be divisible by heads {}",
                self.embed_dim, self.latte_dim, self.heads
            )));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return bad("conv_kernel must be odd");
        }
        if self.cnn_channels.contains(&0) {
            return bad("cnn channels must be positive");
        }
        Ok(())
    }
}
