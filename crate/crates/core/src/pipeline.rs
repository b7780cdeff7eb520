//! Model loading and the single-image localization pipeline.

use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::image_io::ImageTensor;
use crate::prompts::TextTokenPair;
use crate::scorer::{build_map, score_image, score_patches, score_patches_normalized, AnomalyMap};
use crate::tta::{run_tta, TraceRow, TtaConfig};
use crate::vision::{encode_image, EncodeMode};
use crate::weights::{WeightStore, CONFIG_KEY};

/// A validated configuration together with its weights.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: WeightStore,
}

impl Model {
    pub fn new(config: ModelConfig, store: WeightStore) -> Result<Self> {
        store.validate(&config)?;
        Ok(Model { config, store })
    }

    /// Loads an archive. The config comes from `config_path` when given,
    /// otherwise from the archive's own metadata.
    pub fn load(path: &Path, config_path: Option<&Path>) -> Result<Self> {
        let store = WeightStore::load(path)?;
        let config = match config_path {
            Some(p) => ModelConfig::load(p)?,
            None => match store.metadata().get(CONFIG_KEY) {
                Some(json) => ModelConfig::from_json(json)?,
                None => {
                    return Err(Error::Config(format!(
                        "{} carries no `{CONFIG_KEY}` metadata; pass a config file",
                        path.display()
                    )))
                }
            },
        };
        Model::new(config, store)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalizeOptions {
    pub mode: EncodeMode,
    /// Logit temperature; falls back to the model's when unset.
    pub tau: Option<f32>,
    pub tta: Option<TtaConfig>,
    pub smooth_sigma: f32,
    /// Average the class-token score with the highest patch score.
    pub fusion: bool,
    /// Output map size `(H, W)`; defaults to the image's original size.
    pub map_size: Option<(usize, usize)>,
}

impl Default for LocalizeOptions {
    fn default() -> Self {
        LocalizeOptions {
            mode: EncodeMode::VvMulti,
            tau: None,
            tta: None,
            smooth_sigma: 0.0,
            fusion: false,
            map_size: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Localization {
    pub image_score: f32,
    pub patch_scores: Vec<f32>,
    pub map: AnomalyMap,
    /// Adaptation losses when test-time adaptation ran.
    pub trace: Option<Vec<TraceRow>>,
}

pub fn localize(model: &Model, image: &ImageTensor, pair: &TextTokenPair, opts: &LocalizeOptions) -> Result<Localization> {
    if pair.embed_dim() != model.config.embed_dim {
        return Err(Error::Config(format!(
            "text tokens have dimension {}, model embeds into {}",
            pair.embed_dim(),
            model.config.embed_dim
        )));
    }
    let tau = opts.tau.unwrap_or(model.config.temperature);
    if !(tau > 0.0) {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    let out = encode_image(image, &model.store, &model.config, opts.mode)?;
    let mut image_score = score_image(&out.class_token, pair, tau);
    let (patch_scores, trace) = match &opts.tta {
        None => (score_patches(&out.patches, pair, tau), None),
        Some(cfg) => {
            let cfg = TtaConfig { tau, ..cfg.clone() };
            let adapted = run_tta(&out.patches, pair, &cfg)?;
            (score_patches_normalized(&adapted.adapted, pair, tau)?, Some(adapted.trace))
        }
    };
    if patch_scores.iter().any(|s| !s.is_finite()) || !image_score.is_finite() {
        return Err(Error::NonFinite { op: "localize" });
    }
    if opts.fusion {
        let top = patch_scores.iter().cloned().fold(0.0f32, f32::max);
        image_score = 0.5 * (image_score + top);
    }
    let size = opts.map_size.unwrap_or((image.original_height, image.original_width));
    let map = build_map(&patch_scores, out.grid, size, opts.smooth_sigma)?;
    Ok(Localization {
        image_score,
        patch_scores,
        map,
        trace,
    })
}
