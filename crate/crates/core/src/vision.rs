//! Visual tower with four ways of extracting patch tokens.
//!
//! The class token always comes from the unmodified forward pass. The modes
//! only change how patch tokens are read out:
//!
//! | mode       | patch tokens                                                  |
//! |------------|---------------------------------------------------------------|
//! | `qkv`      | final activations of the unmodified pass                      |
//! | `v_last`   | value projection of the last layer's input                    |
//! | `vv_last`  | those values after one value-to-value block                   |
//! | `vv_multi` | a parallel value path over layers `vv_start_layer..`          |
//!
//! Every readout goes through `ln_post`, the visual projection and row-wise
//! L2 normalization. The class row of the value path is discarded.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, VvMode};
use crate::error::{Error, Result};
use crate::image_io::ImageTensor;
use crate::tensor::{self, l2_normalize_rows, layer_norm, Tensor};
use crate::transformer::{qkv_block, value_projection, vv_attention, vv_block, BlockParams, BlockWeights};
use crate::weights::WeightStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncodeMode {
    Qkv,
    VLast,
    VvLast,
    VvMulti,
}

impl EncodeMode {
    pub const ALL: [EncodeMode; 4] = [EncodeMode::Qkv, EncodeMode::VLast, EncodeMode::VvLast, EncodeMode::VvMulti];

    pub fn as_str(self) -> &'static str {
        match self {
            EncodeMode::Qkv => "qkv",
            EncodeMode::VLast => "v_last",
            EncodeMode::VvLast => "vv_last",
            EncodeMode::VvMulti => "vv_multi",
        }
    }
}

impl fmt::Display for EncodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EncodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EncodeMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown encode mode `{s}` (qkv, v_last, vv_last, vv_multi)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisualOutput {
    /// Unit-norm class token, `[C]`.
    pub class_token: Tensor,
    /// Unit-norm patch tokens, `[M, C]`, row-major over the patch grid.
    pub patches: Tensor,
    pub grid: (usize, usize),
}

/// Splits the image into patches, embeds them, prepends the class
/// embedding and adds positional embeddings: `[(M+1), width]`.
pub fn patchify(image: &ImageTensor, store: &WeightStore, config: &ModelConfig) -> Result<Tensor> {
    let s = config.image_size;
    let p = config.patch_size;
    if image.pixels.shape() != [3, s, s] {
        return Err(Error::Config(format!(
            "image tensor {:?} does not match configured size {s}",
            image.pixels.shape()
        )));
    }
    let w_embed = store.get("visual.patch_embed.weight")?;
    let cls = store.get("visual.class_embedding")?;
    let pos = store.get("visual.positional_embedding")?;
    let g = config.grid_side();
    let m = g * g;
    if w_embed.shape() != [config.vision_width, config.patch_dim()] || pos.shape() != [m + 1, config.vision_width] {
        return Err(Error::Config(format!(
            "patch embedding {:?} / positional embedding {:?} do not fit {m} patches of width {}",
            w_embed.shape(),
            pos.shape(),
            config.vision_width
        )));
    }
    let px = image.pixels.data();
    let mut patches = Vec::with_capacity(m * config.patch_dim());
    for gy in 0..g {
        for gx in 0..g {
            for c in 0..3 {
                for y in 0..p {
                    let row = c * s * s + (gy * p + y) * s + gx * p;
                    patches.extend_from_slice(&px[row..row + p]);
                }
            }
        }
    }
    let patches = Tensor::matrix(m, config.patch_dim(), patches)?;
    let emb = tensor::matmul_t(&patches, w_embed)?;
    let mut z = Vec::with_capacity((m + 1) * config.vision_width);
    z.extend_from_slice(cls.data());
    z.extend_from_slice(emb.data());
    let mut z = Tensor::matrix(m + 1, config.vision_width, z)?;
    tensor::add_inplace(&mut z, pos)?;
    Ok(z)
}

fn layer<'a>(store: &'a WeightStore, l: usize) -> Result<BlockWeights<'a>> {
    BlockWeights::from_store(store, &format!("visual.layer{l}"))
}

/// `ln_post` → projection → row normalization.
fn project(rows: &Tensor, store: &WeightStore, config: &ModelConfig) -> Result<Tensor> {
    let x = layer_norm(
        rows,
        store.get("visual.ln_post.weight")?,
        store.get("visual.ln_post.bias")?,
        config.layer_norm_eps,
    )?;
    l2_normalize_rows(&tensor::matmul(&x, store.get("visual.proj")?)?)
}

fn drop_class_row(x: &Tensor) -> Result<Tensor> {
    x.slice_rows(1, x.rows())
}

pub fn encode_image(image: &ImageTensor, store: &WeightStore, config: &ModelConfig, mode: EncodeMode) -> Result<VisualOutput> {
    let layers = config.vision_layers;
    let params = BlockParams {
        heads: config.vision_heads,
        eps: config.layer_norm_eps,
        gelu: config.gelu_variant,
        causal: false,
    };
    let mut z = layer_norm(
        &patchify(image, store, config)?,
        store.get("visual.ln_pre.weight")?,
        store.get("visual.ln_pre.bias")?,
        config.layer_norm_eps,
    )?;

    // Parallel value-path state, present once layer `vv_start_layer` is reached.
    let mut vpath: Option<Tensor> = None;
    let mut last_values: Option<Tensor> = None;
    for l in 0..layers {
        let w = layer(store, l)?;
        if mode == EncodeMode::VvMulti && l >= config.vv_start_layer {
            vpath = Some(match (config.vv_mode, vpath.take()) {
                (VvMode::DualPath, state) => {
                    let values = value_projection(&z, &w, config.layer_norm_eps)?;
                    let mut state = match state {
                        Some(s) => s,
                        None => z.clone(),
                    };
                    tensor::add_inplace(&mut state, &vv_attention(&values, &w, config.vision_heads)?)?;
                    state
                }
                (VvMode::Chained, None) => {
                    let values = value_projection(&z, &w, config.layer_norm_eps)?;
                    vv_block(&values, &w, config.vision_heads)?
                }
                (VvMode::Chained, Some(s)) => vv_block(&s, &w, config.vision_heads)?,
            });
        }
        if l + 1 == layers && matches!(mode, EncodeMode::VLast | EncodeMode::VvLast) {
            last_values = Some(value_projection(&z, &w, config.layer_norm_eps)?);
        }
        z = qkv_block(&z, &w, params)?;
    }

    let class_row = z.slice_rows(0, 1)?;
    let class_token = project(&class_row, store, config)?.reshape(vec![config.embed_dim])?;

    let patch_rows = match mode {
        EncodeMode::Qkv => drop_class_row(&z)?,
        EncodeMode::VLast => drop_class_row(&last_values.expect("set on last layer"))?,
        EncodeMode::VvLast => {
            let w = layer(store, layers - 1)?;
            let v = vv_block(&last_values.expect("set on last layer"), &w, config.vision_heads)?;
            drop_class_row(&v)?
        }
        EncodeMode::VvMulti => drop_class_row(&vpath.expect("start layer is below layer count"))?,
    };
    let g = config.grid_side();
    Ok(VisualOutput {
        class_token,
        patches: project(&patch_rows, store, config)?,
        grid: (g, g),
    })
}
