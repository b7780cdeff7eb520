//! Prompt banks, their expansion into normal/abnormal sentence pairs, and
//! the averaged text tokens used for scoring.
//!
//! A bank file is JSON:
//!
//! ```json
//! {
//!   "base_templates": ["a {domain} photo of a {state} {class}."],
//!   "state_pairs": [["perfect", "imperfect"]],
//!   "domain_words": ["industrial"],
//!   "per_class_states": {"carpet": [["without a hole", "with a hole"]]}
//! }
//! ```
//!
//! Expansion order is template-major, then state pair, then domain word.
//! Runs of whitespace left by empty slot words are collapsed.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::text::encode_text;
use crate::tokenizer::TokenizerSpec;
use crate::weights::WeightStore;

const SLOTS: [&str; 3] = ["{domain}", "{state}", "{class}"];

/// The three-tier banks shipped with the crate.
pub const DEFAULT_BANK: &str = include_str!("../assets/prompts_default.json");
pub const BASE_BANK: &str = include_str!("../assets/prompts_base.json");
pub const STATES_BANK: &str = include_str!("../assets/prompts_cs.json");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptBank {
    pub base_templates: Vec<String>,
    pub state_pairs: Vec<(String, String)>,
    pub domain_words: Vec<String>,
    /// Extra state pairs appended when expanding for a matching class.
    #[serde(default)]
    pub per_class_states: BTreeMap<String, Vec<(String, String)>>,
    #[serde(default, skip_serializing)]
    pub class_name: String,
}

impl PromptBank {
    pub fn from_json(text: &str, class_name: &str) -> Result<Self> {
        let mut bank: PromptBank = serde_json::from_str(text)?;
        bank.class_name = class_name.to_string();
        bank.validate()?;
        Ok(bank)
    }

    pub fn load(path: &Path, class_name: &str) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, class_name)
    }

    /// Built-in bank by tier name: `base`, `cs` or `default`.
    pub fn builtin(tier: &str, class_name: &str) -> Result<Self> {
        let text = match tier {
            "base" => BASE_BANK,
            "cs" => STATES_BANK,
            "default" | "da" => DEFAULT_BANK,
            other => return Err(Error::Config(format!("unknown prompt tier `{other}` (base, cs, default)"))),
        };
        Self::from_json(text, class_name)
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_templates.is_empty() || self.domain_words.is_empty() {
            return Err(Error::Config("prompt bank needs at least one template and one domain word".into()));
        }
        if self.state_pairs.is_empty() {
            return Err(Error::Config("prompt bank has no state pairs".into()));
        }
        for t in &self.base_templates {
            for slot in SLOTS {
                let n = t.matches(slot).count();
                if n != 1 {
                    return Err(Error::Config(format!(
                        "template `{t}` must contain {slot} exactly once (found {n})"
                    )));
                }
            }
        }
        Ok(())
    }

    /// State pairs in effect for this bank's class.
    pub fn states(&self) -> Vec<(String, String)> {
        let mut s = self.state_pairs.clone();
        if let Some(extra) = self.per_class_states.get(&self.class_name) {
            s.extend(extra.iter().cloned());
        }
        s
    }

    pub fn len(&self) -> usize {
        self.base_templates.len() * self.states().len() * self.domain_words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn fill(template: &str, domain: &str, state: &str, class: &str) -> String {
    let s = template
        .replace("{domain}", domain)
        .replace("{state}", state)
        .replace("{class}", class);
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// All `(normal, abnormal)` sentences of the bank.
pub fn expand_prompts(bank: &PromptBank) -> Result<Vec<(String, String)>> {
    bank.validate()?;
    let states = bank.states();
    let mut out = Vec::with_capacity(bank.len());
    for t in &bank.base_templates {
        for (good, bad) in &states {
            for d in &bank.domain_words {
                out.push((fill(t, d, good, &bank.class_name), fill(t, d, bad, &bank.class_name)));
            }
        }
    }
    Ok(out)
}

/// Averaged normal (`t_plus`) and abnormal (`t_minus`) text tokens together
/// with the full token matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct TextTokenPair {
    pub t_plus: Tensor,
    pub t_minus: Tensor,
    /// `[2N, C]`; rows `0..N` normal, `N..2N` abnormal.
    pub tokens: Tensor,
}

impl TextTokenPair {
    pub fn embed_dim(&self) -> usize {
        self.t_plus.len()
    }

    /// Number of prompt pairs `N`.
    pub fn pairs(&self) -> usize {
        self.tokens.rows() / 2
    }

    /// Same tokens with the roles of the two halves exchanged.
    pub fn swapped(&self) -> Result<TextTokenPair> {
        let n = self.pairs();
        let mut data = self.tokens.slice_rows(n, 2 * n)?.into_data();
        data.extend_from_slice(self.tokens.slice_rows(0, n)?.data());
        Ok(TextTokenPair {
            t_plus: self.t_minus.clone(),
            t_minus: self.t_plus.clone(),
            tokens: Tensor::matrix(2 * n, self.tokens.cols(), data)?,
        })
    }

    pub fn to_store(&self) -> WeightStore {
        let mut s = WeightStore::new();
        s.insert("t_plus", self.t_plus.clone());
        s.insert("t_minus", self.t_minus.clone());
        s.insert("tokens", self.tokens.clone());
        s
    }

    pub fn from_store(store: &WeightStore) -> Result<Self> {
        let pair = TextTokenPair {
            t_plus: store.get("t_plus")?.clone(),
            t_minus: store.get("t_minus")?.clone(),
            tokens: store.get("tokens")?.clone(),
        };
        let c = pair.t_plus.len();
        let t = pair.tokens.shape();
        if pair.t_plus.shape() != [c] || pair.t_minus.shape() != [c] || t.len() != 2 || t[1] != c || !t[0].is_multiple_of(2) {
            return Err(Error::Config(format!(
                "token archive shapes do not agree: t_plus {:?}, t_minus {:?}, tokens {:?}",
                pair.t_plus.shape(),
                pair.t_minus.shape(),
                t
            )));
        }
        Ok(pair)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_store().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_store(&WeightStore::load(path)?)
    }
}

fn normalized_mean(rows: &Tensor, start: usize, end: usize, what: &str) -> Result<Tensor> {
    let c = rows.cols();
    let mut acc = vec![0.0f64; c];
    for i in start..end {
        for (a, &v) in acc.iter_mut().zip(rows.row(i)) {
            *a += v as f64;
        }
    }
    let n = (end - start) as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    let norm = acc.iter().map(|a| a * a).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return Err(Error::Degenerate(format!("mean {what} prompt embedding has zero norm")));
    }
    Tensor::vector(acc.iter().map(|a| (a / norm) as f32).collect())
}

/// Splits `[2N, C]` embeddings into halves and renormalizes each mean.
pub fn average_tokens(embeddings: Tensor) -> Result<TextTokenPair> {
    let shape = embeddings.shape();
    if shape.len() != 2 || shape[0] < 2 || !shape[0].is_multiple_of(2) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "prompt embeddings must be [2N, C] with N >= 1".into(),
        });
    }
    let n = shape[0] / 2;
    Ok(TextTokenPair {
        t_plus: normalized_mean(&embeddings, 0, n, "normal")?,
        t_minus: normalized_mean(&embeddings, n, 2 * n, "abnormal")?,
        tokens: embeddings,
    })
}

/// Encodes explicit sentence pairs and averages them.
pub fn encode_pairs(
    pairs: &[(String, String)],
    tokenizer: &TokenizerSpec,
    store: &WeightStore,
    config: &ModelConfig,
) -> Result<TextTokenPair> {
    if pairs.is_empty() {
        return Err(Error::Config("no prompts to encode".into()));
    }
    let sentences: Vec<&str> = pairs
        .iter()
        .map(|p| p.0.as_str())
        .chain(pairs.iter().map(|p| p.1.as_str()))
        .collect();
    let rows = sentences
        .par_iter()
        .map(|s| encode_text(&tokenizer.tokenize(s), store, config))
        .collect::<Result<Vec<_>>>()?;
    let c = config.embed_dim;
    let mut data = Vec::with_capacity(rows.len() * c);
    for r in rows {
        data.extend(r.into_data());
    }
    average_tokens(Tensor::matrix(sentences.len(), c, data)?)
}

pub fn build_token_pair(
    bank: &PromptBank,
    tokenizer: &TokenizerSpec,
    store: &WeightStore,
    config: &ModelConfig,
) -> Result<TextTokenPair> {
    encode_pairs(&expand_prompts(bank)?, tokenizer, store, config)
}
