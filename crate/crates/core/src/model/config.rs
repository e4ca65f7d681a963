use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::tokenizer::VOCAB_SIZE;

/// Hyper-parameters of the encoder, projector and decoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_width: usize,
    pub image_height: usize,
    pub patch_size: usize,
    pub d_vision: usize,
    pub vision_layers: usize,
    pub vision_heads: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub context: usize,
    pub vocab_size: usize,
    /// Number of affine layers in the projector (GELU between layers).
    pub proj_depth: usize,
    /// Hidden width of every MLP as a multiple of its block width.
    pub mlp_ratio: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_width: 32,
            image_height: 32,
            patch_size: 8,
            d_vision: 64,
            vision_layers: 2,
            vision_heads: 4,
            d_model: 64,
            layers: 4,
            heads: 4,
            context: 256,
            vocab_size: VOCAB_SIZE,
            proj_depth: 1,
            mlp_ratio: 4,
        }
    }
}

pub(crate) const LN_EPS: f64 = 1e-5;

impl ModelConfig {
    pub fn num_patches(&self) -> usize {
        (self.image_width / self.patch_size) * (self.image_height / self.patch_size)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.patch_size == 0
            || !self.image_width.is_multiple_of(self.patch_size)
            || !self.image_height.is_multiple_of(self.patch_size)
        {
            return fail(format!(
                "{}x{} images are not divisible by patch size {}",
                self.image_width, self.image_height, self.patch_size
            ));
        }
        if self.image_width == 0 || self.image_height == 0 {
            return fail("image dimensions must be positive".into());
        }
        for (name, width, heads) in [
            ("d_vision", self.d_vision, self.vision_heads),
            ("d_model", self.d_model, self.heads),
        ] {
            if heads == 0 || width == 0 || width % heads != 0 {
                return fail(format!("{name}={width} is not divisible by {heads} heads"));
            }
        }
        if self.context < self.num_patches() + 16 {
            return fail(format!(
                "context {} must be at least patches ({}) + 16",
                self.context,
                self.num_patches()
            ));
        }
        if self.vocab_size != VOCAB_SIZE {
            return fail(format!("vocab_size must be {VOCAB_SIZE}, got {}", self.vocab_size));
        }
        if self.proj_depth == 0 || self.mlp_ratio == 0 {
            return fail("proj_depth and mlp_ratio must be at least 1".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_with_sixteen_patches() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.num_patches(), 16);
        assert_eq!(cfg.patch_dim(), 192);
    }

    #[test]
    fn rejects_head_mismatch_and_short_context() {
        let cfg = ModelConfig {
            heads: 3,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig {
            context: 31,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig {
            context: 32,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_ok());
    }
}
