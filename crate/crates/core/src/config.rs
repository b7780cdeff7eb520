//! Architecture hyperparameters.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::GeluVariant;

/// How the multi-layer value path is driven.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VvMode {
    /// Each adapted layer's values come from the original path; the
    /// parallel state accumulates the value-to-value attention outputs.
    #[default]
    DualPath,
    /// Value-to-value blocks applied as a self-recurrence seeded with the
    /// values of the first adapted layer.
    Chained,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub vision_width: usize,
    pub vision_layers: usize,
    pub vision_heads: usize,
    /// Joint embedding dimension shared by both towers.
    pub embed_dim: usize,
    pub text_width: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub context_length: usize,
    pub vocab_size: usize,
    pub mlp_ratio: usize,
    /// First vision layer (0-based) that the multi-layer value path adapts.
    pub vv_start_layer: usize,
    pub vv_mode: VvMode,
    /// Logit scale applied to cosine similarities before the two-way softmax.
    pub temperature: f32,
    pub gelu_variant: GeluVariant,
    pub layer_norm_eps: f32,
    pub image_mean: [f32; 3],
    pub image_std: [f32; 3],
}

impl Default for ModelConfig {
    /// ViT-B-16+ at 240 px, as published with open CLIP checkpoints. The
    /// pixel statistics are kept digit for digit.
    #[allow(clippy::excessive_precision)]
    fn default() -> Self {
        ModelConfig {
            image_size: 240,
            patch_size: 16,
            vision_width: 896,
            vision_layers: 12,
            vision_heads: 14,
            embed_dim: 640,
            text_width: 640,
            text_layers: 12,
            text_heads: 10,
            context_length: 77,
            vocab_size: 49408,
            mlp_ratio: 4,
            vv_start_layer: 6,
            vv_mode: VvMode::DualPath,
            temperature: 100.0,
            gelu_variant: GeluVariant::Erf,
            layer_norm_eps: 1e-5,
            image_mean: [0.481_454_66, 0.457_827_5, 0.408_210_73],
            image_std: [0.268_629_54, 0.261_302_58, 0.275_777_11],
        }
    }
}

impl ModelConfig {
    /// Two-layer model used by tests and CI fixtures. Pixel statistics are
    /// (0, 1) so that preprocessing is a plain `/255`.
    pub fn tiny() -> Self {
        ModelConfig {
            image_size: 32,
            patch_size: 16,
            vision_width: 16,
            vision_layers: 2,
            vision_heads: 2,
            embed_dim: 8,
            text_width: 16,
            text_layers: 2,
            text_heads: 2,
            context_length: 32,
            vocab_size: 2562,
            vv_start_layer: 1,
            image_mean: [0.0; 3],
            image_std: [1.0; 3],
            ..ModelConfig::default()
        }
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Number of patch tokens `M`.
    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.vision_layers == 0 || self.vv_start_layer >= self.vision_layers {
            return fail(format!(
                "vv_start_layer {} must be below vision_layers {}",
                self.vv_start_layer, self.vision_layers
            ));
        }
        for (name, width, heads) in [
            ("vision", self.vision_width, self.vision_heads),
            ("text", self.text_width, self.text_heads),
        ] {
            if heads == 0 || width == 0 || width % heads != 0 {
                return fail(format!(
                    "{name} width {width} is not divisible by {heads} heads"
                ));
            }
        }
        if self.embed_dim == 0 || self.context_length < 2 || self.vocab_size == 0 {
            return fail("embed_dim, context_length and vocab_size must be positive".into());
        }
        if self.mlp_ratio == 0 {
            return fail("mlp_ratio must be positive".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return fail(format!("temperature {} must be positive", self.temperature));
        }
        if !(self.layer_norm_eps >= 0.0) {
            return fail("layer_norm_eps must be non-negative".into());
        }
        if self.image_std.iter().any(|s| !(*s > 0.0)) {
            return fail("image_std entries must be positive".into());
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("model config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}
