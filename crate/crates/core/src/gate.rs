//! Language-aware gating of visual tokens, and the cross-attention
//! baseline it replaces in the ablations.
//!
//! For each head `h`, row `i` of the visual input is scaled by
//! `dist_i^h = Σ_l cos(w_q v_i, w_k t_l)` (cosine over the head's slice),
//! applied to `w_v v_i`; heads are concatenated and mapped by `w_o`.
//! Because the coefficient is a per-row scalar, output row `i` depends only
//! on input row `i` and the text.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{mismatch, Error, Result};
use crate::nn::{attention, init_projections, linear};
use crate::params::{Graph, ParamStore};

/// Stabilizer on the projected norms: each row is divided by `max(‖·‖, NORM_EPS)`.
pub const NORM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    #[default]
    LaGate,
    CrossAttention,
}

pub fn init_gate<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, dim: usize) {
    init_projections(store, rng, prefix, dim);
}

fn check(g: &Graph, v: Var, text: Var, heads: usize) -> Result<usize> {
    let dim = g.tape.cols(v);
    if g.tape.rows(text) == 0 || g.tape.value(text).is_empty() {
        return Err(Error::EmptyText);
    }
    if g.tape.cols(text) != dim || heads == 0 || dim % heads != 0 {
        return Err(mismatch(format!(
            "gate input {:?}, text {:?}, {heads} heads",
            g.tape.shape(v),
            g.tape.shape(text)
        )));
    }
    Ok(dim / heads)
}

/// Per-head importance `[m, H]`.
pub fn importance_vector(
    g: &mut Graph,
    v: Var,
    text: Var,
    prefix: &str,
    heads: usize,
) -> Result<Var> {
    let hd = check(g, v, text, heads)?;
    let w_q = g.param(&format!("{prefix}.w_q.w"))?;
    if g.tape.rows(w_q) != g.tape.cols(v) {
        return Err(mismatch(format!(
            "gate `{prefix}` expects width {}",
            g.tape.rows(w_q)
        )));
    }
    let q = linear(g, v, &format!("{prefix}.w_q"))?;
    let k = linear(g, text, &format!("{prefix}.w_k"))?;
    let mut cols = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.tape.slice_cols(q, h * hd, hd)?;
        let kh = g.tape.slice_cols(k, h * hd, hd)?;
        let qn = g.tape.normalize_rows(qh, NORM_EPS);
        let kn = g.tape.normalize_rows(kh, NORM_EPS);
        let cos = g.tape.matmul_nt(qn, kn)?;
        cols.push(g.tape.sum_cols(cos));
    }
    if heads == 1 {
        Ok(cols[0])
    } else {
        g.tape.concat_cols(&cols)
    }
}

/// The gated branch alone, `w_o(concat_h(dist^h ⊙ value^h))`.
pub fn gate_delta(g: &mut Graph, v: Var, text: Var, prefix: &str, heads: usize) -> Result<Var> {
    let dist = importance_vector(g, v, text, prefix, heads)?;
    let hd = g.tape.cols(v) / heads;
    let value = linear(g, v, &format!("{prefix}.w_v"))?;
    let mut parts = Vec::with_capacity(heads);
    for h in 0..heads {
        let vh = g.tape.slice_cols(value, h * hd, hd)?;
        let dh = g.tape.slice_cols(dist, h, 1)?;
        parts.push(g.tape.mul_col(vh, dh)?);
    }
    let cat = if heads == 1 {
        parts[0]
    } else {
        g.tape.concat_cols(&parts)?
    };
    linear(g, cat, &format!("{prefix}.w_o"))
}

/// `v + gate_delta(v, text)`.
pub fn la_gate(g: &mut Graph, v: Var, text: Var, prefix: &str, heads: usize) -> Result<Var> {
    let d = gate_delta(g, v, text, prefix, heads)?;
    g.tape.add(v, d)
}

/// Attention with the video rows as queries and the text tokens as keys and
/// values, without the skip.
pub fn cross_attention_delta(
    g: &mut Graph,
    v: Var,
    text: Var,
    prefix: &str,
    heads: usize,
) -> Result<Var> {
    check(g, v, text, heads)?;
    attention(g, v, text, prefix, heads, None)
}

pub fn cross_attention_v2t(
    g: &mut Graph,
    v: Var,
    text: Var,
    prefix: &str,
    heads: usize,
) -> Result<Var> {
    let d = cross_attention_delta(g, v, text, prefix, heads)?;
    g.tape.add(v, d)
}

pub fn fusion_delta(
    g: &mut Graph,
    fusion: Fusion,
    v: Var,
    text: Var,
    prefix: &str,
    heads: usize,
) -> Result<Var> {
    match fusion {
        Fusion::LaGate => gate_delta(g, v, text, prefix, heads),
        Fusion::CrossAttention => cross_attention_delta(g, v, text, prefix, heads),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::GradCheck;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity(d: usize) -> Tensor {
        let mut data = vec![0.0; d * d];
        for i in 0..d {
            data[i * d + i] = 1.0;
        }
        Tensor::matrix(d, d, data).unwrap()
    }

    fn identity_gate(d: usize) -> ParamStore {
        let mut s = ParamStore::new();
        for p in ["w_q", "w_k", "w_v", "w_o"] {
            s.insert(format!("g.{p}.w"), identity(d));
        }
        s
    }

    fn dist_of(store: &ParamStore, v: &Tensor, t: &Tensor, heads: usize) -> Vec<f64> {
        let mut g = Graph::new(store);
        let vv = g.tape.leaf(v);
        let tv = g.tape.leaf(t);
        let d = importance_vector(&mut g, vv, tv, "g", heads).unwrap();
        g.tape.value(d).to_vec()
    }

    #[test]
    fn identity_projection_anchors() {
        let store = identity_gate(2);
        let t = Tensor::matrix(1, 2, vec![3.0, 0.0]).unwrap();
        let v = Tensor::matrix(2, 2, vec![2.0, 0.0, 0.0, 5.0]).unwrap();
        assert_eq!(dist_of(&store, &v, &t, 1), vec![1.0, 0.0]);
        let t2 = Tensor::matrix(2, 2, vec![3.0, 0.0, 3.0, 0.0]).unwrap();
        assert_eq!(dist_of(&store, &v, &t2, 1), vec![2.0, 0.0]);
    }

    #[test]
    fn orthogonal_text_leaves_input_unchanged() {
        let store = identity_gate(2);
        let v = Tensor::matrix(3, 2, vec![1.0, 0.0, -2.0, 0.0, 0.5, 0.0]).unwrap();
        let t = Tensor::matrix(1, 2, vec![0.0, 3.0]).unwrap();
        let mut g = Graph::new(&store);
        let vv = g.tape.leaf(&v);
        let tv = g.tape.leaf(&t);
        let out = la_gate(&mut g, vv, tv, "g", 1).unwrap();
        assert_eq!(g.tape.value(out), v.data());
    }

    #[test]
    fn empty_text_and_width_mismatch() {
        let store = identity_gate(4);
        let mut g = Graph::new(&store);
        let v = g.tape.constant(&[2, 4], vec![1.0; 8]).unwrap();
        let t = g.tape.constant(&[0, 4], vec![]).unwrap();
        let err = la_gate(&mut g, v, t, "g", 2).unwrap_err();
        assert_eq!(err.to_string(), "empty text condition");
        let v3 = g.tape.constant(&[2, 3], vec![1.0; 6]).unwrap();
        let t3 = g.tape.constant(&[1, 3], vec![1.0; 3]).unwrap();
        assert!(matches!(
            la_gate(&mut g, v3, t3, "g", 1),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn cross_attention_mixes_rows_gate_does_not() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        init_gate(&mut store, &mut rng, "g", 4);
        let v = Tensor::matrix(2, 4, (0..8).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let run = |t2: f64, cross: bool| {
            let t = Tensor::matrix(2, 4, vec![0.3, -0.2, 0.9, 0.1, t2, 0.4, -0.5, 0.2]).unwrap();
            let mut g = Graph::new(&store);
            let vv = g.tape.leaf(&v);
            let tv = g.tape.leaf(&t);
            let out = if cross {
                cross_attention_v2t(&mut g, vv, tv, "g", 2).unwrap()
            } else {
                la_gate(&mut g, vv, tv, "g", 2).unwrap()
            };
            g.tape.value(out).to_vec()
        };
        let (a, b) = (run(0.7, true), run(-0.7, true));
        assert!(a[..4] != b[..4] && a[4..] != b[4..]);
    }

    #[test]
    fn gate_and_cross_attention_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        init_gate(&mut store, &mut rng, "g", 8);
        store.init_normal(&mut rng, "v", &[4, 8], 1.0);
        store.init_normal(&mut rng, "t", &[1, 8], 1.0);
        for cross in [false, true] {
            let r = GradCheck::new(1e-5)
                .run_store(&store, |g| {
                    let v = g.param("v")?;
                    let t = g.param("t")?;
                    let out = if cross {
                        cross_attention_v2t(g, v, t, "g", 2)?
                    } else {
                        la_gate(g, v, t, "g", 2)?
                    };
                    let w: Vec<f64> = (0..32).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect();
                    let w = g.tape.constant(&[4, 8], w)?;
                    let p = g.tape.mul(out, w)?;
                    Ok(g.tape.mean(p))
                })
                .unwrap();
            assert!(r.pass, "cross={cross}: {r:?}");
        }
    }
}
