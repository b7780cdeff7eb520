//! Named weight tensors and the `.vvt` tensor-archive format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! [0..8)    magic  b"VVTARCH1"
//! [8..16)   u64    header length H
//! [16..16+H) UTF-8 JSON header, space-padded to a multiple of 8 bytes
//! [16+H..)  tensor blobs, raw little-endian f32, back to back
//! ```
//!
//! The header is a JSON object. The key `__metadata__` maps to a flat
//! string→string object that always contains `format_version`. Every other
//! key is a tensor name mapping to
//! `{"dtype": "f32", "shape": [..], "data_offset": o, "data_length": n}`
//! where `o` is relative to the start of the blob section and
//! `n == 4 * product(shape)`. Tensors are written in name order, so equal
//! stores serialize to equal bytes.
//!
//! Tensor names follow the manifest produced by [`required_tensors`]:
//!
//! ```text
//! visual.patch_embed.weight       [width, 3*p*p]   (input flattened c, y, x)
//! visual.class_embedding          [width]
//! visual.positional_embedding     [M+1, width]
//! visual.ln_pre.{weight,bias}     [width]
//! visual.layer{i}.ln_1.{weight,bias}
//! visual.layer{i}.attn.qkv_weight [3*width, width] (rows: q, k, v)
//! visual.layer{i}.attn.qkv_bias   [3*width]
//! visual.layer{i}.attn.out_weight [width, width]
//! visual.layer{i}.attn.out_bias   [width]
//! visual.layer{i}.ln_2.{weight,bias}
//! visual.layer{i}.mlp.fc1_weight  [ratio*width, width]
//! visual.layer{i}.mlp.fc1_bias    [ratio*width]
//! visual.layer{i}.mlp.fc2_weight  [width, ratio*width]
//! visual.layer{i}.mlp.fc2_bias    [width]
//! visual.ln_post.{weight,bias}    [width]
//! visual.proj                     [width, C]
//! text.token_embedding            [vocab, text_width]
//! text.positional_embedding       [context, text_width]
//! text.layer{i}.*                 as the visual layers, with text_width
//! text.ln_final.{weight,bias}     [text_width]
//! text.projection                 [text_width, C]
//! ```
//!
//! Linear weights are stored `[out, in]`; the two projections are stored
//! `[in, out]` as in CLIP checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::rng::{fnv1a, XorShift64Star};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"VVTARCH1";
pub const FORMAT_VERSION: &str = "1";
const METADATA_KEY: &str = "__metadata__";
/// Metadata key under which [`crate::Model`] archives carry their config.
pub const CONFIG_KEY: &str = "model_config";

#[derive(Clone, Debug, PartialEq)]
pub struct WeightStore {
    entries: BTreeMap<String, Tensor>,
    metadata: BTreeMap<String, String>,
}

impl Default for WeightStore {
    fn default() -> Self {
        Self::new()
    }
}

impl WeightStore {
    pub fn new() -> Self {
        let mut metadata = BTreeMap::new();
        metadata.insert("format_version".to_string(), FORMAT_VERSION.to_string());
        WeightStore {
            entries: BTreeMap::new(),
            metadata,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn set_metadata(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    /// Checks that every tensor the architecture needs is present with the
    /// right shape.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        config.validate()?;
        for (name, shape) in required_tensors(config) {
            let t = self.get(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "tensor `{name}` has shape {:?}, architecture expects {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Canonical serialization. Rejects stores holding non-finite values.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if !self.metadata.contains_key("format_version") {
            return Err(Error::Config("metadata lacks format_version".into()));
        }
        let mut header = serde_json::Map::new();
        header.insert(
            METADATA_KEY.to_string(),
            serde_json::to_value(&self.metadata)?,
        );
        let mut offset = 0u64;
        for (name, t) in &self.entries {
            if name == METADATA_KEY {
                return Err(Error::Config(format!("tensor name `{name}` is reserved")));
            }
            if !t.is_finite() {
                return Err(Error::Config(format!("tensor `{name}` holds non-finite values")));
            }
            let length = 4 * t.len() as u64;
            let entry = HeaderEntry {
                dtype: "f32".into(),
                shape: t.shape().to_vec(),
                data_offset: offset,
                data_length: length,
            };
            header.insert(name.clone(), serde_json::to_value(entry)?);
            offset += length;
        }
        let mut header_bytes = serde_json::to_vec(&Value::Object(header))?;
        while header_bytes.len() % 8 != 0 {
            header_bytes.push(b' ');
        }
        let mut out = Vec::with_capacity(16 + header_bytes.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        for t in self.entries.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Truncated {
                offset: bytes.len() as u64,
                needed: 8 - bytes.len() as u64,
            });
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::BadMagic { offset: 0 });
        }
        if bytes.len() < 16 {
            return Err(Error::Truncated {
                offset: bytes.len() as u64,
                needed: 16 - bytes.len() as u64,
            });
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let data_start = 16u64
            .checked_add(header_len)
            .ok_or(Error::Header {
                offset: 8,
                message: "header length overflows".into(),
            })?;
        if (bytes.len() as u64) < data_start {
            return Err(Error::Truncated {
                offset: bytes.len() as u64,
                needed: data_start - bytes.len() as u64,
            });
        }
        let header: serde_json::Map<String, Value> =
            serde_json::from_slice(&bytes[16..data_start as usize]).map_err(|e| Error::Header {
                offset: 16,
                message: e.to_string(),
            })?;

        let mut store = WeightStore {
            entries: BTreeMap::new(),
            metadata: BTreeMap::new(),
        };
        let blob = &bytes[data_start as usize..];
        for (name, value) in header {
            if name == METADATA_KEY {
                store.metadata = serde_json::from_value(value).map_err(|e| Error::Header {
                    offset: 16,
                    message: format!("metadata: {e}"),
                })?;
                continue;
            }
            let entry: HeaderEntry = serde_json::from_value(value).map_err(|e| Error::Header {
                offset: 16,
                message: format!("entry `{name}`: {e}"),
            })?;
            let abs_offset = data_start + entry.data_offset;
            if entry.dtype != "f32" {
                return Err(Error::Header {
                    offset: 16,
                    message: format!("entry `{name}`: unsupported dtype {}", entry.dtype),
                });
            }
            let count: u64 = entry.shape.iter().map(|&d| d as u64).product();
            if entry.shape.is_empty() || entry.shape.contains(&0) {
                return Err(Error::Header {
                    offset: 16,
                    message: format!("entry `{name}`: invalid shape {:?}", entry.shape),
                });
            }
            if entry.data_length != 4 * count {
                return Err(Error::SizeMismatch {
                    name,
                    offset: abs_offset,
                    expected: 4 * count,
                    actual: entry.data_length,
                });
            }
            let end = entry.data_offset.checked_add(entry.data_length);
            match end {
                Some(end) if end <= blob.len() as u64 => {}
                _ => {
                    return Err(Error::Truncated {
                        offset: abs_offset,
                        needed: (entry.data_offset + entry.data_length)
                            .saturating_sub(blob.len() as u64),
                    })
                }
            }
            let raw = &blob[entry.data_offset as usize..(entry.data_offset + entry.data_length) as usize];
            let mut data = Vec::with_capacity(count as usize);
            for (i, chunk) in raw.chunks_exact(4).enumerate() {
                let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
                if !v.is_finite() {
                    return Err(Error::NonFiniteTensor {
                        name,
                        offset: abs_offset + 4 * i as u64,
                    });
                }
                data.push(v);
            }
            store.entries.insert(name, Tensor::new(entry.shape, data)?);
        }
        if !store.metadata.contains_key("format_version") {
            return Err(Error::Header {
                offset: 16,
                message: "metadata lacks format_version".into(),
            });
        }
        Ok(store)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offset: u64,
    data_length: u64,
}

fn block_tensors(prefix: &str, width: usize, ratio: usize, out: &mut Vec<(String, Vec<usize>)>) {
    let hidden = ratio * width;
    let mut push = |suffix: &str, shape: Vec<usize>| out.push((format!("{prefix}.{suffix}"), shape));
    push("ln_1.weight", vec![width]);
    push("ln_1.bias", vec![width]);
    push("attn.qkv_weight", vec![3 * width, width]);
    push("attn.qkv_bias", vec![3 * width]);
    push("attn.out_weight", vec![width, width]);
    push("attn.out_bias", vec![width]);
    push("ln_2.weight", vec![width]);
    push("ln_2.bias", vec![width]);
    push("mlp.fc1_weight", vec![hidden, width]);
    push("mlp.fc1_bias", vec![hidden]);
    push("mlp.fc2_weight", vec![width, hidden]);
    push("mlp.fc2_bias", vec![width]);
}

/// Every tensor name and shape the architecture reads.
pub fn required_tensors(c: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let w = c.vision_width;
    out.push(("visual.patch_embed.weight".into(), vec![w, c.patch_dim()]));
    out.push(("visual.class_embedding".into(), vec![w]));
    out.push(("visual.positional_embedding".into(), vec![c.num_patches() + 1, w]));
    out.push(("visual.ln_pre.weight".into(), vec![w]));
    out.push(("visual.ln_pre.bias".into(), vec![w]));
    for i in 0..c.vision_layers {
        block_tensors(&format!("visual.layer{i}"), w, c.mlp_ratio, &mut out);
    }
    out.push(("visual.ln_post.weight".into(), vec![w]));
    out.push(("visual.ln_post.bias".into(), vec![w]));
    out.push(("visual.proj".into(), vec![w, c.embed_dim]));

    let tw = c.text_width;
    out.push(("text.token_embedding".into(), vec![c.vocab_size, tw]));
    out.push(("text.positional_embedding".into(), vec![c.context_length, tw]));
    for i in 0..c.text_layers {
        block_tensors(&format!("text.layer{i}"), tw, c.mlp_ratio, &mut out);
    }
    out.push(("text.ln_final.weight".into(), vec![tw]));
    out.push(("text.ln_final.bias".into(), vec![tw]));
    out.push(("text.projection".into(), vec![tw, c.embed_dim]));
    out
}

/// Deterministic random weights for the given architecture.
///
/// Each tensor draws from its own [`XorShift64Star`] seeded with
/// `seed ^ fnv1a(name)`. Layer-norm weights are 1 and biases 0; every other
/// tensor is `uniform_pm1() / sqrt(fan_in)` where `fan_in` is the last axis
/// of `[out, in]` linear weights, the first axis of the two `[in, out]`
/// projections, and the embedding width for embeddings.
pub fn make_synthetic_model(config: &ModelConfig, seed: u64) -> Result<WeightStore> {
    config.validate()?;
    let mut store = WeightStore::new();
    store.set_metadata(CONFIG_KEY, config.to_json());
    store.set_metadata("synthetic_seed", seed.to_string());
    for (name, shape) in required_tensors(config) {
        let n: usize = shape.iter().product();
        let data = if name.contains(".ln_") {
            let fill = if name.ends_with(".weight") { 1.0 } else { 0.0 };
            vec![fill; n]
        } else {
            let fan_in = if name == "visual.proj" || name == "text.projection" {
                shape[0]
            } else {
                *shape.last().expect("non-empty")
            };
            let s = 1.0 / (fan_in as f32).sqrt();
            let mut rng = XorShift64Star::new(seed ^ fnv1a(name.as_bytes()));
            (0..n).map(|_| rng.uniform_pm1() * s).collect()
        };
        store.insert(name, Tensor::new(shape, data)?);
    }
    Ok(store)
}
