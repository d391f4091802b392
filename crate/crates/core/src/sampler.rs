//! Text-conditioned frame selection.
//!
//! Frame CLS tokens get a learned temporal embedding, pass through `L`
//! FS-blocks (gate → self-attention → MLP, pre-norm), and a bias-free `D→K`
//! head scores every frame for each of the `K` slots. Each slot draws one
//! frame with Gumbel noise; the straight-through mask makes the forward pass
//! an exact frame copy while gradients follow the soft distribution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::config::{ModelConfig, SamplerMode};
use crate::error::{mismatch, Error, Result};
use crate::gate::{fusion_delta, init_gate, Fusion};
use crate::nn::{attention, init_mlp, init_projections, layer_norm, linear, mlp};
use crate::ops::argmax;
use crate::params::{Graph, ParamStore};
use crate::tensor::Tensor;

pub const GUMBEL_CLAMP: f64 = 1e-10;

/// Row-wise selection: `hard` one-hots, the `soft` distribution behind them,
/// and the chosen frame per row.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleMask {
    #[serde(skip)]
    pub hard: Tensor,
    #[serde(skip)]
    pub soft: Tensor,
    pub indices: Vec<usize>,
}

impl SampleMask {
    pub fn soft_rows(&self) -> Vec<Vec<f64>> {
        let n = self.soft.cols();
        self.soft.data().chunks(n).map(<[f64]>::to_vec).collect()
    }
}

/// Standard Gumbel draws, `−ln(−ln U)` with `U` clamped away from 0 and 1.
pub fn gumbel_noise<R: Rng>(rng: &mut R, len: usize) -> Vec<f64> {
    (0..len)
        .map(|_| {
            let u: f64 = rng.random::<f64>().clamp(GUMBEL_CLAMP, 1.0 - GUMBEL_CLAMP);
            -(-u.ln()).ln()
        })
        .collect()
}

/// `softmax((x + g) / τ_g)` for one logit vector with noise drawn from `seed`.
pub fn gumbel_softmax(logits: &[f64], tau_g: f64, seed: u64) -> Result<Vec<f64>> {
    if !(tau_g > 0.0) {
        return Err(Error::NonPositiveTemperature);
    }
    let g = gumbel_noise(&mut ChaCha8Rng::seed_from_u64(seed), logits.len());
    let z: Vec<f64> = logits
        .iter()
        .zip(&g)
        .map(|(x, g)| (x + g) / tau_g)
        .collect();
    crate::ops::softmax_stable(&z)
}

/// Tape version over the rows of `x`, with caller-supplied noise.
pub fn gumbel_softmax_rows(t: &mut Tape, x: Var, noise: &[f64], tau_g: f64) -> Result<Var> {
    if !(tau_g > 0.0) {
        return Err(Error::NonPositiveTemperature);
    }
    if noise.len() != t.value(x).len() {
        return Err(mismatch(format!(
            "{} noise values for {:?} logits",
            noise.len(),
            t.shape(x)
        )));
    }
    let g = t.constant(t.shape(x).to_vec().as_slice(), noise.to_vec())?;
    let z = t.add(x, g)?;
    let z = t.scale(z, 1.0 / tau_g);
    t.softmax(z)
}

/// `hard + (y_soft − stopgrad(y_soft))`, evaluated in that order so the
/// forward value is exactly `hard`.
pub fn straight_through_mask(t: &mut Tape, y_soft: Var) -> Result<(Var, SampleMask)> {
    let (k, n) = (t.rows(y_soft), t.cols(y_soft));
    let soft = t.value(y_soft).to_vec();
    let indices: Vec<usize> = soft.chunks(n).map(argmax).collect();
    let mut hard = vec![0.0; k * n];
    for (r, &i) in indices.iter().enumerate() {
        hard[r * n + i] = 1.0;
    }
    let hard_v = t.constant(&[k, n], hard.clone())?;
    let frozen = t.stop_grad(y_soft);
    let zero = t.sub(y_soft, frozen)?;
    let st = t.add(hard_v, zero)?;
    let mask = SampleMask {
        hard: Tensor::matrix(k, n, hard)?,
        soft: Tensor::matrix(k, n, soft)?,
        indices,
    };
    Ok((st, mask))
}

/// `round(f·(N−1)/(K−1))` for `f = 0..K`; a single slot takes `⌊N/2⌋`.
pub fn uniform_indices(n: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > n {
        return Err(mismatch(format!("cannot pick {k} of {n} frames")));
    }
    if k == 1 {
        return Ok(vec![n / 2]);
    }
    Ok((0..k)
        .map(|f| (f as f64 * (n - 1) as f64 / (k - 1) as f64).round() as usize)
        .collect())
}

pub fn uniform_select(n: usize, k: usize) -> Result<SampleMask> {
    let indices = uniform_indices(n, k)?;
    let mut hard = vec![0.0; k * n];
    for (r, &i) in indices.iter().enumerate() {
        hard[r * n + i] = 1.0;
    }
    let hard = Tensor::matrix(k, n, hard)?;
    Ok(SampleMask {
        soft: hard.clone(),
        hard,
        indices,
    })
}

pub fn add_temporal_embedding(g: &mut Graph, cls: Var, table: &str) -> Result<Var> {
    let n = g.tape.rows(cls);
    let tab = g.param(table)?;
    let available = g.tape.rows(tab);
    if n > available {
        return Err(Error::TemporalTableTooSmall {
            needed: n,
            available,
        });
    }
    let rows = if n == available {
        tab
    } else {
        g.tape.slice_rows(tab, 0, n)?
    };
    g.tape.add(cls, rows)
}

pub fn init_fs_block<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    dim: usize,
    mlp_ratio: usize,
) {
    store.init_layer_norm(&format!("{prefix}.ln1"), dim);
    init_gate(store, rng, &format!("{prefix}.gate"), dim);
    store.init_layer_norm(&format!("{prefix}.ln2"), dim);
    init_projections(store, rng, &format!("{prefix}.attn"), dim);
    store.init_layer_norm(&format!("{prefix}.ln3"), dim);
    init_mlp(store, rng, &format!("{prefix}.mlp"), dim, dim * mlp_ratio);
}

/// Pre-norm block over frame tokens `[N, D]`, conditioned on `text [L, D]`.
pub fn fs_block(
    g: &mut Graph,
    x: Var,
    text: Var,
    prefix: &str,
    heads: usize,
    fusion: Fusion,
) -> Result<Var> {
    let h = layer_norm(g, x, &format!("{prefix}.ln1"))?;
    let d = fusion_delta(g, fusion, h, text, &format!("{prefix}.gate"), heads)?;
    let x = g.tape.add(x, d)?;
    let h = layer_norm(g, x, &format!("{prefix}.ln2"))?;
    let d = attention(g, h, h, &format!("{prefix}.attn"), heads, None)?;
    let x = g.tape.add(x, d)?;
    let h = layer_norm(g, x, &format!("{prefix}.ln3"))?;
    let d = mlp(g, h, &format!("{prefix}.mlp"))?;
    g.tape.add(x, d)
}

pub fn init_sampler<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: &ModelConfig) {
    store.init_normal(rng, "sampler.temporal", &[cfg.table_rows(), cfg.dim], 0.02);
    for l in 0..cfg.layers {
        init_fs_block(
            store,
            rng,
            &format!("sampler.fs.{l}"),
            cfg.dim,
            cfg.mlp_ratio,
        );
    }
    store.init_normal(
        rng,
        "sampler.w_s.w",
        &[cfg.dim, cfg.select],
        cfg.ws_init_std,
    );
}

/// Slot-by-frame scores `x ∈ ℝ^{K×N}`.
pub fn frame_logits(g: &mut Graph, cls: Var, text: Var, cfg: &ModelConfig) -> Result<Var> {
    let mut x = add_temporal_embedding(g, cls, "sampler.temporal")?;
    for l in 0..cfg.layers {
        x = fs_block(
            g,
            x,
            text,
            &format!("sampler.fs.{l}"),
            cfg.heads,
            cfg.fusion,
        )?;
    }
    let scores = linear(g, x, "sampler.w_s")?;
    Ok(g.tape.transpose(scores))
}

/// Selected patches `[K·n², D]` plus the mask that produced them.
pub struct Selection {
    pub frames: Var,
    pub mask: SampleMask,
    pub logits: Option<Var>,
    pub y_soft: Option<Var>,
}

/// Picks `K` frames according to `cfg.sampler`.
///
/// `patches` is `[N, n²·D]` and `cls` is `[N, D]`. Without `noise` the learned
/// samplers select by plain argmax of the scores.
pub fn select_frames(
    g: &mut Graph,
    cfg: &ModelConfig,
    patches: Var,
    cls: Var,
    text: Var,
    noise: Option<&[f64]>,
    tau_g: f64,
) -> Result<Selection> {
    let n = g.tape.rows(patches);
    let width = g.tape.cols(patches);
    let dim = g.tape.cols(cls);
    if g.tape.rows(cls) != n || width % dim != 0 {
        return Err(mismatch(format!(
            "patches {:?} vs cls {:?}",
            g.tape.shape(patches),
            g.tape.shape(cls)
        )));
    }
    let k = cfg.select;
    let reshape = |g: &mut Graph, v: Var| g.tape.reshape(v, &[k * width / dim, dim]);
    match cfg.sampler {
        SamplerMode::Uniform | SamplerMode::None => {
            let mask = uniform_select(n, k)?;
            let picked = g.tape.gather_rows(patches, &mask.indices)?;
            Ok(Selection {
                frames: reshape(g, picked)?,
                mask,
                logits: None,
                y_soft: None,
            })
        }
        SamplerMode::Sparse | SamplerMode::Soft => {
            let logits = frame_logits(g, cls, text, cfg)?;
            let zeros;
            let noise = match noise {
                Some(z) => z,
                None => {
                    zeros = vec![0.0; k * n];
                    &zeros
                }
            };
            let y_soft = gumbel_softmax_rows(&mut g.tape, logits, noise, tau_g)?;
            let (weights, mask) = if cfg.sampler == SamplerMode::Sparse {
                straight_through_mask(&mut g.tape, y_soft)?
            } else {
                let (_, m) = straight_through_mask(&mut g.tape, y_soft)?;
                (
                    y_soft,
                    SampleMask {
                        hard: m.soft.clone(),
                        ..m
                    },
                )
            };
            let picked = g.tape.matmul(weights, patches)?;
            Ok(Selection {
                frames: reshape(g, picked)?,
                mask,
                logits: Some(logits),
                y_soft: Some(y_soft),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::GradCheck;

    #[test]
    fn uniform_anchors() {
        assert_eq!(
            uniform_indices(100, 16).unwrap(),
            vec![0, 7, 13, 20, 26, 33, 40, 46, 53, 59, 66, 73, 79, 86, 92, 99]
        );
        assert_eq!(uniform_indices(4, 2).unwrap(), vec![0, 3]);
        assert_eq!(uniform_indices(7, 7).unwrap(), (0..7).collect::<Vec<_>>());
        assert_eq!(uniform_indices(9, 1).unwrap(), vec![4]);
        assert!(uniform_indices(3, 4).is_err());
        let m = uniform_select(4, 2).unwrap();
        assert_eq!(m.hard.data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(m.soft, m.hard);
    }

    #[test]
    fn straight_through_forward_is_hard() {
        let mut t = Tape::new();
        let y = t
            .param(&[2, 3], vec![0.1, 0.7, 0.2, 0.4, 0.4, 0.2])
            .unwrap();
        let (st, mask) = straight_through_mask(&mut t, y).unwrap();
        assert_eq!(mask.indices, vec![1, 0]);
        assert_eq!(t.value(st), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
        assert!(t
            .value(st)
            .iter()
            .zip(mask.hard.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn gumbel_softmax_normalizes_and_checks_tau() {
        let y = gumbel_softmax(&[0.3, -1.0, 2.0, 0.0], 1.0, 11).unwrap();
        assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        assert!(y.iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(y, gumbel_softmax(&[0.3, -1.0, 2.0, 0.0], 1.0, 11).unwrap());
        let err = gumbel_softmax(&[0.0], 0.0, 1).unwrap_err();
        assert_eq!(err.to_string(), "nonpositive temperature");
        // cold limit: one-hot at argmax(x + g)
        let x = [0.3, -1.0, 2.0, 0.0];
        let g = gumbel_noise(&mut ChaCha8Rng::seed_from_u64(11), 4);
        let z: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a + b).collect();
        let cold = gumbel_softmax(&x, 1e-4, 11).unwrap();
        assert!((cold[argmax(&z)] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn temporal_embedding_bounds_and_gradients() {
        let mut store = ParamStore::new();
        store.insert(
            "tab",
            Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
        );
        store.insert(
            "cls",
            Tensor::matrix(2, 2, vec![0.5, -0.5, 0.25, 0.0]).unwrap(),
        );
        let mut g = Graph::new(&store);
        let zeros = g.tape.constant(&[2, 2], vec![0.0; 4]).unwrap();
        let out = add_temporal_embedding(&mut g, zeros, "tab").unwrap();
        assert_eq!(g.tape.value(out), &[1.0, 2.0, 3.0, 4.0]);
        let four = g.tape.constant(&[4, 2], vec![0.0; 8]).unwrap();
        let err = add_temporal_embedding(&mut g, four, "tab").unwrap_err();
        assert!(matches!(
            err,
            Error::TemporalTableTooSmall {
                needed: 4,
                available: 3
            }
        ));
        let r = GradCheck::new(1e-5)
            .run_store(&store, |g| {
                let c = g.param("cls")?;
                let y = add_temporal_embedding(g, c, "tab")?;
                let y = g.tape.tanh(y);
                Ok(g.tape.sum(y))
            })
            .unwrap();
        assert!(r.pass);
        assert_eq!(r.params.len(), 2);
    }

    #[test]
    fn fs_block_zero_residuals_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        init_fs_block(&mut store, &mut rng, "b", 8, 2);
        for name in ["b.gate.w_o.w", "b.attn.w_o.w", "b.mlp.fc2.w", "b.mlp.fc2.b"] {
            store.get_mut(name).unwrap().data_mut().fill(0.0);
        }
        let x = Tensor::matrix(3, 8, (0..24).map(|i| (i as f64).cos()).collect()).unwrap();
        let t = Tensor::matrix(1, 8, (0..8).map(|i| (i as f64).sin()).collect()).unwrap();
        let mut g = Graph::new(&store);
        let xv = g.tape.leaf(&x);
        let tv = g.tape.leaf(&t);
        let y = fs_block(&mut g, xv, tv, "b", 2, Fusion::LaGate).unwrap();
        assert_eq!(g.tape.value(y), x.data());
    }
}
