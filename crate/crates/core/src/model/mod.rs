//! A small masked autoencoder over the concatenated visible patches of one or
//! two images, with exact reverse-mode gradients.

mod checkpoint;
mod layers;
mod mae;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, OptimizerSnapshot};
pub use layers::{gelu, gelu_grad};
pub use mae::{
    average_gradients, patchify, unpatchify, EncodeCache, ForwardPass, LossOutput, MaskedAutoencoder, MaskedPair,
    MaskedView, TokenBatch, VisibleEmbedding,
};
pub use params::{Gradients, Param, ParamId, ParameterStore};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which pixel space the visibility weight ratio is evaluated in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightSpace {
    /// The reconstruction-target space (per-patch normalized when
    /// `norm_pix_loss` is on).
    #[default]
    Loss,
    /// Raw [0, 1] pixels; predictions are de-normalized first.
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub input_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub enc_dim: usize,
    pub enc_depth: usize,
    pub dec_dim: usize,
    pub dec_depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Multiplier applied to normalized coordinates before the sinusoids.
    pub coord_scale: f64,
    pub norm_pix_loss: bool,
    pub weight_space: WeightSpace,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 32,
            patch_size: 8,
            channels: 3,
            enc_dim: 64,
            enc_depth: 2,
            dec_dim: 32,
            dec_depth: 1,
            heads: 4,
            mlp_ratio: 4,
            coord_scale: 100.0,
            norm_pix_loss: true,
            weight_space: WeightSpace::Loss,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.input_size == 0 || !self.input_size.is_multiple_of(self.patch_size) {
            return fail(format!(
                "input_size {} must be a positive multiple of patch_size {}",
                self.input_size, self.patch_size
            ));
        }
        if self.heads == 0 {
            return fail("heads must be >= 1".into());
        }
        for (name, d) in [("enc_dim", self.enc_dim), ("dec_dim", self.dec_dim)] {
            if d == 0 || d % 4 != 0 || d % self.heads != 0 {
                return fail(format!(
                    "{name} = {d} must be divisible by 4 and by heads = {}",
                    self.heads
                ));
            }
        }
        if self.channels == 0 || self.mlp_ratio == 0 {
            return fail("channels and mlp_ratio must be >= 1".into());
        }
        if !(self.coord_scale.is_finite() && self.coord_scale > 0.0) {
            return fail("coord_scale must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.input_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}
