//! Toy denoiser: adapter projections, the dual-memory attention block, and
//! a frame-token block stack predicting a velocity field.
//!
//! Every primitive has a hand-written backward pass. Gradients come back as
//! a model-shaped value whose tensors line up with [`ToyDiT::tensors`].

mod block;
mod checkpoint;
mod dit;
mod lora;

pub use block::{BlockOutput, DualMemoryBlock};
pub use checkpoint::CHECKPOINT_MAGIC;
pub use dit::{sinusoid, timestep_embedding, DitOutput, GradRecorder, LayerCapture, ToyDiT, TrainMode};
pub use lora::{lora_project, LoRAAdapter, Projection};

use crate::error::{Error, Result};
use crate::narrative::DEFAULT_EMBED_DIM;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layer_count: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ffn_hidden: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// `[C, T0, H, W]` of one clip.
    pub latent: [usize; 4],
    pub embed_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layer_count: 2,
            heads: 4,
            head_dim: 16,
            ffn_hidden: 128,
            lora_rank: 4,
            lora_alpha: 8.0,
            latent: [4, 16, 8, 8],
            embed_dim: DEFAULT_EMBED_DIM,
        }
    }
}

impl ModelConfig {
    pub fn hidden(&self) -> usize {
        self.heads * self.head_dim
    }

    /// Values per frame token.
    pub fn patch_len(&self) -> usize {
        self.latent[0] * self.latent[2] * self.latent[3]
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("layer_count", self.layer_count),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("ffn_hidden", self.ffn_hidden),
            ("lora_rank", self.lora_rank),
            ("embed_dim", self.embed_dim),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.latent.contains(&0) {
            return Err(Error::Config(format!("latent shape {:?} has an empty axis", self.latent)));
        }
        if !(self.lora_alpha.is_finite() && self.lora_alpha > 0.0) {
            return Err(Error::Config(format!("lora_alpha {} must be positive", self.lora_alpha)));
        }
        Ok(())
    }
}
