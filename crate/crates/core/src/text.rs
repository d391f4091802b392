//! Small trainable text encoder over frozen word embeddings: positional
//! embedding, one pre-norm attention layer, final norm. Row 0 is `t_cls`.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{attention, init_projections, layer_norm};
use crate::params::{Graph, ParamStore};
use crate::tensor::Tensor;

pub const MAX_TOKENS: usize = 12;

pub fn init_text_encoder<R: Rng>(store: &mut ParamStore, rng: &mut R, dim: usize) {
    store.init_normal(rng, "text.pos", &[MAX_TOKENS, dim], 0.02);
    store.init_layer_norm("text.ln1", dim);
    init_projections(store, rng, "text.attn", dim);
    store.init_layer_norm("text.lnf", dim);
}

/// Token outputs `[M, D]`. The word table is frozen and enters as a constant.
pub fn encode_text(g: &mut Graph, tokens: &[usize], words: &Tensor, heads: usize) -> Result<Var> {
    if tokens.is_empty() {
        return Err(Error::EmptyText);
    }
    if tokens.len() > MAX_TOKENS {
        return Err(Error::DimensionMismatch(format!(
            "{} tokens, at most {MAX_TOKENS}",
            tokens.len()
        )));
    }
    let d = words.cols();
    let mut emb = Vec::with_capacity(tokens.len() * d);
    for &t in tokens {
        if t >= words.rows() {
            return Err(Error::Format(format!("token id {t} outside vocabulary")));
        }
        emb.extend_from_slice(words.row(t));
    }
    let x = g.tape.constant(&[tokens.len(), d], emb)?;
    let pos = g.param("text.pos")?;
    let pos = g.tape.slice_rows(pos, 0, tokens.len())?;
    let x = g.tape.add(x, pos)?;
    let h = layer_norm(g, x, "text.ln1")?;
    let a = attention(g, h, h, "text.attn", heads, None)?;
    let x = g.tape.add(x, a)?;
    layer_norm(g, x, "text.lnf")
}
