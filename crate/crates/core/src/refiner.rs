//! Refinement of the selected frames into a single video token.
//!
//! The sequence is `[cls; patches]` with spatial and slot embeddings added
//! once at the input. Each VR-block gates every row (CLS included), then runs
//! divided attention — temporal (same patch position across slots) before
//! spatial (same slot) — and an MLP, all pre-norm with residuals. The CLS
//! query sees the whole sequence in both stages. Only row 0 leaves.

use rand::Rng;

use crate::autodiff::Var;
use crate::config::ModelConfig;
use crate::error::{mismatch, Result};
use crate::gate::{fusion_delta, init_gate, Fusion};
use crate::nn::{attention, init_mlp, init_projections, layer_norm, mlp, MASKED};
use crate::params::{Graph, ParamStore};

/// Additive masks `[S × S]`, `S = K·P + 1`, for the temporal and spatial
/// stages. Token `1 + k·P + p` is patch `p` of slot `k`.
pub fn divided_masks(k: usize, p: usize) -> (Vec<f64>, Vec<f64>) {
    let s = k * p + 1;
    let mut temporal = vec![MASKED; s * s];
    let mut spatial = vec![MASKED; s * s];
    for j in 0..s {
        temporal[j] = 0.0;
        spatial[j] = 0.0;
    }
    for i in 1..s {
        let (fi, pi) = ((i - 1) / p, (i - 1) % p);
        temporal[i * s] = 0.0;
        spatial[i * s] = 0.0;
        for j in 1..s {
            let (fj, pj) = ((j - 1) / p, (j - 1) % p);
            if pi == pj {
                temporal[i * s + j] = 0.0;
            }
            if fi == fj {
                spatial[i * s + j] = 0.0;
            }
        }
    }
    (temporal, spatial)
}

pub fn init_vr_block<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    dim: usize,
    mlp_ratio: usize,
) {
    store.init_layer_norm(&format!("{prefix}.ln1"), dim);
    init_gate(store, rng, &format!("{prefix}.gate"), dim);
    store.init_layer_norm(&format!("{prefix}.ln2"), dim);
    init_projections(store, rng, &format!("{prefix}.temporal"), dim);
    store.init_layer_norm(&format!("{prefix}.ln3"), dim);
    init_projections(store, rng, &format!("{prefix}.spatial"), dim);
    store.init_layer_norm(&format!("{prefix}.ln4"), dim);
    init_mlp(store, rng, &format!("{prefix}.mlp"), dim, dim * mlp_ratio);
}

pub fn init_plain_block<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    dim: usize,
    mlp_ratio: usize,
) {
    store.init_layer_norm(&format!("{prefix}.ln1"), dim);
    init_projections(store, rng, &format!("{prefix}.attn"), dim);
    store.init_layer_norm(&format!("{prefix}.ln2"), dim);
    init_mlp(store, rng, &format!("{prefix}.mlp"), dim, dim * mlp_ratio);
}

pub fn init_refiner<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: &ModelConfig) {
    store.init_normal(rng, "refiner.cls", &[1, cfg.dim], 0.02);
    store.init_normal(rng, "refiner.spatial", &[cfg.patches(), cfg.dim], 0.02);
    store.init_normal(rng, "refiner.temporal", &[cfg.select, cfg.dim], 0.02);
    for l in 0..cfg.layers {
        if cfg.refiner {
            init_vr_block(
                store,
                rng,
                &format!("refiner.vr.{l}"),
                cfg.dim,
                cfg.mlp_ratio,
            );
        } else {
            init_plain_block(
                store,
                rng,
                &format!("refiner.plain.{l}"),
                cfg.dim,
                cfg.mlp_ratio,
            );
        }
    }
}

/// `[K·P, D]` selected patches → `[K·P + 1, D]` block input.
pub fn assemble_input(g: &mut Graph, frames: Var, k: usize, p: usize) -> Result<Var> {
    if g.tape.rows(frames) != k * p {
        return Err(mismatch(format!(
            "{} patch rows for {k} slots × {p} patches",
            g.tape.rows(frames)
        )));
    }
    let spatial = g.param("refiner.spatial")?;
    let temporal = g.param("refiner.temporal")?;
    if g.tape.rows(spatial) != p || g.tape.rows(temporal) != k {
        return Err(mismatch(
            "refiner embedding tables do not match the selection",
        ));
    }
    let sp_idx: Vec<usize> = (0..k * p).map(|i| i % p).collect();
    let tm_idx: Vec<usize> = (0..k * p).map(|i| i / p).collect();
    let sp = g.tape.gather_rows(spatial, &sp_idx)?;
    let tm = g.tape.gather_rows(temporal, &tm_idx)?;
    let x = g.tape.add(frames, sp)?;
    let x = g.tape.add(x, tm)?;
    let cls = g.param("refiner.cls")?;
    g.tape.concat_rows(&[cls, x])
}

#[allow(clippy::too_many_arguments)]
pub fn vr_block(
    g: &mut Graph,
    x: Var,
    text: Var,
    prefix: &str,
    heads: usize,
    fusion: Fusion,
    masks: &(Vec<f64>, Vec<f64>),
) -> Result<Var> {
    let s = g.tape.rows(x);
    if masks.0.len() != s * s {
        return Err(mismatch(format!(
            "sequence of {s} rows vs mask for {}",
            (masks.0.len() as f64).sqrt()
        )));
    }
    let h = layer_norm(g, x, &format!("{prefix}.ln1"))?;
    let d = fusion_delta(g, fusion, h, text, &format!("{prefix}.gate"), heads)?;
    let x = g.tape.add(x, d)?;
    let h = layer_norm(g, x, &format!("{prefix}.ln2"))?;
    let d = attention(
        g,
        h,
        h,
        &format!("{prefix}.temporal"),
        heads,
        Some(&masks.0),
    )?;
    let x = g.tape.add(x, d)?;
    let h = layer_norm(g, x, &format!("{prefix}.ln3"))?;
    let d = attention(g, h, h, &format!("{prefix}.spatial"), heads, Some(&masks.1))?;
    let x = g.tape.add(x, d)?;
    let h = layer_norm(g, x, &format!("{prefix}.ln4"))?;
    let d = mlp(g, h, &format!("{prefix}.mlp"))?;
    g.tape.add(x, d)
}

pub fn plain_block(g: &mut Graph, x: Var, prefix: &str, heads: usize) -> Result<Var> {
    let h = layer_norm(g, x, &format!("{prefix}.ln1"))?;
    let d = attention(g, h, h, &format!("{prefix}.attn"), heads, None)?;
    let x = g.tape.add(x, d)?;
    let h = layer_norm(g, x, &format!("{prefix}.ln2"))?;
    let d = mlp(g, h, &format!("{prefix}.mlp"))?;
    g.tape.add(x, d)
}

/// Video token `[1, D]` from selected patches `[K·P, D]`.
///
/// With `cfg.refiner == false` the text token is appended to the sequence
/// and plain full-attention blocks do the fusion instead.
pub fn refine(g: &mut Graph, frames: Var, text: Var, cfg: &ModelConfig) -> Result<Var> {
    let (k, p) = (cfg.select, cfg.patches());
    let mut x = assemble_input(g, frames, k, p)?;
    if cfg.refiner {
        let masks = divided_masks(k, p);
        for l in 0..cfg.layers {
            x = vr_block(
                g,
                x,
                text,
                &format!("refiner.vr.{l}"),
                cfg.heads,
                cfg.fusion,
                &masks,
            )?;
        }
    } else {
        x = g.tape.concat_rows(&[x, text])?;
        for l in 0..cfg.layers {
            x = plain_block(g, x, &format!("refiner.plain.{l}"), cfg.heads)?;
        }
    }
    g.tape.slice_rows(x, 0, 1)
}
