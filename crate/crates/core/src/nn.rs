//! Dense building blocks over a [`Graph`]. Parameters are looked up by
//! prefix, so a block is just a naming convention plus a forward function.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{mismatch, Result};
use crate::params::{Graph, ParamStore};

pub const LN_EPS: f64 = 1e-5;

/// Additive attention-mask value for blocked pairs.
pub const MASKED: f64 = -1e30;

/// `x · W (+ b)`; the bias is used when `{prefix}.b` exists.
pub fn linear(g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
    let w = g.param(&format!("{prefix}.w"))?;
    let y = g.tape.matmul(x, w)?;
    let bias = format!("{prefix}.b");
    if g.has_param(&bias) {
        let b = g.param(&bias)?;
        g.tape.add_row(y, b)
    } else {
        Ok(y)
    }
}

pub fn layer_norm(g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
    let gamma = g.param(&format!("{prefix}.gamma"))?;
    let beta = g.param(&format!("{prefix}.beta"))?;
    let z = g.tape.layer_norm(x, LN_EPS);
    let z = g.tape.mul_row(z, gamma)?;
    g.tape.add_row(z, beta)
}

pub fn init_mlp<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    dim: usize,
    hidden: usize,
) {
    store.init_linear(rng, &format!("{prefix}.fc1"), dim, hidden, true);
    store.init_linear(rng, &format!("{prefix}.fc2"), hidden, dim, true);
}

pub fn mlp(g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
    let h = linear(g, x, &format!("{prefix}.fc1"))?;
    let h = g.tape.gelu(h);
    linear(g, h, &format!("{prefix}.fc2"))
}

/// Bias-free `w_q, w_k, w_v, w_o`, all `dim × dim`.
pub fn init_projections<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, dim: usize) {
    for p in ["w_q", "w_k", "w_v", "w_o"] {
        store.init_linear(rng, &format!("{prefix}.{p}"), dim, dim, false);
    }
}

/// Scaled dot-product attention, `queries` attending over `keys`.
/// `mask` is an additive `[m_q × m_k]` table (0 or [`MASKED`]).
pub fn attention(
    g: &mut Graph,
    queries: Var,
    keys: Var,
    prefix: &str,
    heads: usize,
    mask: Option<&[f64]>,
) -> Result<Var> {
    let dim = g.tape.cols(queries);
    if dim % heads != 0 || g.tape.cols(keys) != dim {
        return Err(mismatch(format!("attention dim {dim} with {heads} heads")));
    }
    let hd = dim / heads;
    let (mq, mk) = (g.tape.rows(queries), g.tape.rows(keys));
    let q = linear(g, queries, &format!("{prefix}.w_q"))?;
    let k = linear(g, keys, &format!("{prefix}.w_k"))?;
    let v = linear(g, keys, &format!("{prefix}.w_v"))?;
    let mask = match mask {
        Some(m) => Some(g.tape.constant(&[mq, mk], m.to_vec())?),
        None => None,
    };
    let scale = 1.0 / (hd as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.tape.slice_cols(q, h * hd, hd)?;
        let kh = g.tape.slice_cols(k, h * hd, hd)?;
        let vh = g.tape.slice_cols(v, h * hd, hd)?;
        let s = g.tape.matmul_nt(qh, kh)?;
        let mut s = g.tape.scale(s, scale);
        if let Some(m) = mask {
            s = g.tape.add(s, m)?;
        }
        let a = g.tape.softmax(s)?;
        outs.push(g.tape.matmul(a, vh)?);
    }
    let cat = if heads == 1 {
        outs[0]
    } else {
        g.tape.concat_cols(&outs)?
    };
    linear(g, cat, &format!("{prefix}.w_o"))
}
