//! Zero-shot anomaly localization with a CLIP-style model.
//!
//! The crate runs the whole pipeline on the CPU: a minimal tensor layer,
//! a weight archive format, image and text front ends, a vision encoder
//! with value-to-value attention readouts, prompt ensembling, per-image
//! test-time adaptation of the patch tokens, and the usual segmentation
//! metrics. The `vvclip` binary wraps it for batch use.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod error;
pub mod image_io;
pub mod metrics;
pub mod pipeline;
pub mod prompts;
pub mod rng;
pub mod scorer;
pub mod tensor;
pub mod text;
pub mod tokenizer;
pub mod transformer;
pub mod tta;
pub mod vision;
pub mod weights;

pub use config::{ModelConfig, VvMode};
pub use error::{Error, Result};
pub use image_io::ImageTensor;
pub use pipeline::{localize, LocalizeOptions, Localization, Model};
pub use prompts::{PromptBank, TextTokenPair};
pub use scorer::AnomalyMap;
pub use tensor::Tensor;
pub use tokenizer::{TokenizedPrompt, TokenizerSpec};
pub use tta::TtaConfig;
pub use vision::{EncodeMode, VisualOutput};
pub use weights::WeightStore;
