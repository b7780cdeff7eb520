//! Text tower: embeddings, causal transformer, end-token readout.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{self, l2_normalize_rows, layer_norm, Tensor};
use crate::tokenizer::TokenizedPrompt;
use crate::transformer::{qkv_block, BlockParams, BlockWeights};
use crate::weights::WeightStore;

/// Unit-norm joint-space embedding of one prompt.
pub fn encode_text(prompt: &TokenizedPrompt, store: &WeightStore, config: &ModelConfig) -> Result<Tensor> {
    if prompt.eot_index >= prompt.ids.len() {
        return Err(Error::Input(format!(
            "eot_index {} outside sequence of {}",
            prompt.eot_index,
            prompt.ids.len()
        )));
    }
    encode_ids(&prompt.ids, prompt.eot_index, store, config)
}

/// Like [`encode_text`] but accepts any prefix length up to the context
/// length. Positions after `eot_index` never influence the result.
pub fn encode_ids(ids: &[u32], eot_index: usize, store: &WeightStore, config: &ModelConfig) -> Result<Tensor> {
    let n = ids.len();
    if n == 0 || n > config.context_length || eot_index >= n {
        return Err(Error::Input(format!(
            "sequence of {n} tokens (eot at {eot_index}) does not fit context {}",
            config.context_length
        )));
    }
    let tok = store.get("text.token_embedding")?;
    let pos = store.get("text.positional_embedding")?;
    let width = tok.cols();
    let mut x = Vec::with_capacity(n * width);
    for (i, &id) in ids.iter().enumerate() {
        if id as usize >= tok.rows() {
            return Err(Error::Input(format!("token id {id} outside vocabulary of {}", tok.rows())));
        }
        x.extend(tok.row(id as usize).iter().zip(pos.row(i)).map(|(a, b)| a + b));
    }
    let mut x = Tensor::matrix(n, width, x)?;
    let params = BlockParams {
        heads: config.text_heads,
        eps: config.layer_norm_eps,
        gelu: config.gelu_variant,
        causal: true,
    };
    for l in 0..config.text_layers {
        let w = BlockWeights::from_store(store, &format!("text.layer{l}"))?;
        x = qkv_block(&x, &w, params)?;
    }
    let x = layer_norm(
        &Tensor::matrix(1, width, x.row(eot_index).to_vec())?,
        store.get("text.ln_final.weight")?,
        store.get("text.ln_final.bias")?,
        config.layer_norm_eps,
    )?;
    let y = tensor::matmul(&x, store.get("text.projection")?)?;
    let y = l2_normalize_rows(&y)?;
    y.reshape(vec![config.embed_dim])
}
