use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture and patching hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_points: usize,
    pub patch_count: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub head_count: usize,
    pub mlp_ratio: usize,
    pub base_mask: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// CPU-scale configuration used by default.
    pub fn desk() -> Self {
        Self {
            n_points: 256,
            patch_count: 32,
            patch_size: 16,
            embed_dim: 64,
            encoder_depth: 3,
            decoder_depth: 1,
            head_count: 4,
            mlp_ratio: 4,
            base_mask: 0.6,
        }
    }

    /// The Point-MAE sized model: 1024 points, 64 patches of 32, width 384,
    /// 12 encoder and 4 decoder blocks with 6 heads.
    pub fn point_mae() -> Self {
        Self {
            n_points: 1024,
            patch_count: 64,
            patch_size: 32,
            embed_dim: 384,
            encoder_depth: 12,
            decoder_depth: 4,
            head_count: 6,
            mlp_ratio: 4,
            base_mask: 0.6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_points", self.n_points),
            ("patch_count", self.patch_count),
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("encoder_depth", self.encoder_depth),
            ("decoder_depth", self.decoder_depth),
            ("head_count", self.head_count),
            ("mlp_ratio", self.mlp_ratio),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::param(format!("{name} must be positive")));
        }
        if self.embed_dim % self.head_count != 0 {
            return Err(Error::param(format!(
                "embed_dim {} is not divisible by head_count {}",
                self.embed_dim, self.head_count
            )));
        }
        if self.decoder_depth > self.encoder_depth {
            return Err(Error::param("decoder_depth exceeds encoder_depth"));
        }
        if self.patch_count > self.n_points || self.patch_size > self.n_points {
            return Err(Error::param("patch count and size must not exceed n_points"));
        }
        if !(self.base_mask > 0.5 && self.base_mask < 1.0) {
            return Err(Error::param(format!("base_mask {} outside (0.5, 1)", self.base_mask)));
        }
        Ok(())
    }

    pub fn mlp_hidden(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    /// Width of the per-point stage of the patch embedding.
    pub fn point_hidden(&self) -> usize {
        (self.embed_dim / 2).max(1)
    }

    /// Length of a global feature vector.
    pub fn feature_dim(&self) -> usize {
        2 * self.embed_dim
    }
}
