//! The gradient-oracle suite: every block and loss of the pipeline at a
//! desk-sized width, checked against central differences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Fault, Var};
use crate::config::{ModelConfig, SamplerMode};
use crate::error::Result;
use crate::gate::{cross_attention_v2t, init_gate, la_gate, Fusion};
use crate::gradcheck::{GradCheck, GradReport};
use crate::objectives::{
    contrastive_loss, init_mlm_head, init_vtm_head, nll, vg_mlm_logits, vtm_loss, MaskedText,
};
use crate::params::{Graph, ParamStore};
use crate::refiner::{divided_masks, init_refiner, init_vr_block, refine, vr_block};
use crate::sampler::{fs_block, gumbel_noise, init_fs_block, init_sampler, select_frames};

const DIM: usize = 8;
const HEADS: usize = 2;

/// Output bias of the last frame-sampling block. It shifts every frame's
/// scores for a slot by the same amount, which the softmax over frames
/// ignores, so its gradient is identically zero and differences only see
/// roundoff. Checked separately by [`shift_only_gradient`].
pub const SHIFT_ONLY: &str = "sampler.fs.0.mlp.fc2.b";

#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub check: String,
    #[serde(flatten)]
    pub report: GradReport,
}

/// Fixed readout `mean(x ⊙ W)`. The weights are positive so no column of
/// `W` sums to zero (which would zero out the gradient of any row-constant
/// shift, such as an output bias, and leave only roundoff to compare).
fn readout(g: &mut Graph, x: Var) -> Result<Var> {
    let n = g.tape.value(x).len();
    let w: Vec<f64> = (0..n).map(|i| 0.5 + (i * 7 % 11) as f64 / 10.0).collect();
    let w = g.tape.constant(g.tape.shape(x).to_vec().as_slice(), w)?;
    let p = g.tape.mul(x, w)?;
    Ok(g.tape.mean(p))
}

fn inputs(store: &mut ParamStore, seed: u64, shapes: &[(&str, &[usize])]) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, shape) in shapes {
        store.init_normal(&mut rng, name, shape, 1.0);
    }
}

fn composite_cfg(sampler: SamplerMode) -> ModelConfig {
    ModelConfig {
        frames: 6,
        select: 2,
        layers: 1,
        dim: DIM,
        heads: HEADS,
        patch_side: 2,
        mlp_ratio: 2,
        sampler,
        ..ModelConfig::default()
    }
}

fn composite_store(cfg: &ModelConfig) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut store = ParamStore::new();
    init_sampler(&mut store, &mut rng, cfg);
    init_refiner(&mut store, &mut rng, cfg);
    let (n, p) = (cfg.frames, cfg.patches());
    inputs(
        &mut store,
        22,
        &[
            ("patches", &[n, p * DIM]),
            ("cls", &[n, DIM]),
            ("text", &[1, DIM]),
        ],
    );
    store
}

fn composite_loss(g: &mut Graph, cfg: &ModelConfig, noise: &[f64]) -> Result<Var> {
    let patches = g.param("patches")?;
    let cls = g.param("cls")?;
    let text = g.param("text")?;
    let sel = select_frames(g, cfg, patches, cls, text, Some(noise), cfg.tau_g)?;
    let v = refine(g, sel.frames, text, cfg)?;
    readout(g, v)
}

/// Stop-gradient contract of VG-MLM on a small text encoder: returns the
/// largest gradient entry reaching the encoder through the masked branch
/// and the largest entry reaching the video token.
pub fn mlm_stop_gradient() -> Result<(f64, f64)> {
    use crate::text::{encode_text, init_text_encoder};
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut store = ParamStore::new();
    init_text_encoder(&mut store, &mut rng, DIM);
    init_mlm_head(&mut store, &mut rng, DIM, 6);
    inputs(&mut store, 32, &[("v", &[1, DIM])]);
    let words = crate::tensor::Tensor::matrix(
        6,
        DIM,
        (0..6 * DIM).map(|i| (i as f64 * 0.61).sin()).collect(),
    )?;
    let mut g = Graph::new(&store);
    let masked = encode_text(&mut g, &[1, 3, 4, 5], &words, HEADS)?;
    let v = g.param("v")?;
    let logits = vg_mlm_logits(&mut g, masked, &[1, 3], v)?;
    let loss = nll(&mut g.tape, logits, &[2, 4])?;
    g.tape.backward(loss)?;
    let grads = g.param_grads();
    let max = |f: &dyn Fn(&str) -> bool| {
        grads
            .iter()
            .filter(|(n, _)| f(n))
            .flat_map(|(_, g)| g.iter())
            .fold(0.0f64, |m, x| m.max(x.abs()))
    };
    Ok((max(&|n| n.starts_with("text.")), max(&|n| n == "v")))
}

/// Largest analytic gradient entry of [`SHIFT_ONLY`] in the soft composite.
pub fn shift_only_gradient() -> Result<f64> {
    let noise = gumbel_noise(&mut ChaCha8Rng::seed_from_u64(23), 2 * 6);
    let cfg = composite_cfg(SamplerMode::Soft);
    let store = composite_store(&cfg);
    let mut g = Graph::new(&store);
    let loss = composite_loss(&mut g, &cfg, &noise)?;
    g.tape.backward(loss)?;
    Ok(g.param_grads()[SHIFT_ONLY]
        .iter()
        .fold(0.0, |m, x| m.max(x.abs())))
}

/// Runs all checks at `epsilon`. A `fault` corrupts every backward pass.
pub fn gradient_suite(epsilon: f64, fault: Option<Fault>) -> Result<Vec<CheckOutcome>> {
    let oracle = || {
        let c = GradCheck::new(epsilon);
        match fault {
            Some(f) => c.fault(f),
            None => c,
        }
    };
    let mut out = Vec::new();
    let mut push = |check: &str, report: GradReport| {
        out.push(CheckOutcome {
            check: check.into(),
            report,
        })
    };

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut gate = ParamStore::new();
    init_gate(&mut gate, &mut rng, "g", DIM);
    inputs(&mut gate, 12, &[("v", &[4, DIM]), ("t", &[3, DIM])]);
    push(
        "la_gate",
        oracle().run_store(&gate, |g| {
            let (v, t) = (g.param("v")?, g.param("t")?);
            let y = la_gate(g, v, t, "g", HEADS)?;
            readout(g, y)
        })?,
    );
    push(
        "cross_attention_v2t",
        oracle().run_store(&gate, |g| {
            let (v, t) = (g.param("v")?, g.param("t")?);
            let y = cross_attention_v2t(g, v, t, "g", HEADS)?;
            readout(g, y)
        })?,
    );

    let mut fs = ParamStore::new();
    init_fs_block(&mut fs, &mut rng, "fs", DIM, 2);
    inputs(&mut fs, 13, &[("x", &[5, DIM]), ("t", &[1, DIM])]);
    push(
        "fs_block",
        oracle().run_store(&fs, |g| {
            let (x, t) = (g.param("x")?, g.param("t")?);
            let y = fs_block(g, x, t, "fs", HEADS, Fusion::LaGate)?;
            readout(g, y)
        })?,
    );

    let (k, p) = (2, 4);
    let masks = divided_masks(k, p);
    let mut vr = ParamStore::new();
    init_vr_block(&mut vr, &mut rng, "vr", DIM, 2);
    inputs(&mut vr, 14, &[("x", &[1 + k * p, DIM]), ("t", &[1, DIM])]);
    push(
        "vr_block",
        oracle().run_store(&vr, |g| {
            let (x, t) = (g.param("x")?, g.param("t")?);
            let y = vr_block(g, x, t, "vr", HEADS, Fusion::LaGate, &masks)?;
            readout(g, y)
        })?,
    );

    // Forward of the sparse composite is piecewise constant in the sampler
    // inputs, so differences can only see the refiner side; the sampler side
    // is checked through the soft surrogate, whose backward the
    // straight-through mask reuses unchanged.
    let noise = gumbel_noise(&mut ChaCha8Rng::seed_from_u64(23), 2 * 6);
    let cfg = composite_cfg(SamplerMode::Sparse);
    let store = composite_store(&cfg);
    let refiner_side: Vec<String> = store
        .names()
        .filter(|n| n.starts_with("refiner.") || *n == "patches")
        .map(str::to_string)
        .collect();
    push(
        "sparse_sample_refine",
        oracle()
            .only(refiner_side)
            .run_store(&store, |g| composite_loss(g, &cfg, &noise))?,
    );
    let soft = composite_cfg(SamplerMode::Soft);
    let probed: Vec<String> = store
        .names()
        .filter(|n| *n != SHIFT_ONLY)
        .map(str::to_string)
        .collect();
    push(
        "soft_sample_refine",
        oracle()
            .only(probed)
            .run_store(&store, |g| composite_loss(g, &soft, &noise))?,
    );

    let mut heads = ParamStore::new();
    init_vtm_head(&mut heads, &mut rng, DIM);
    init_mlm_head(&mut heads, &mut rng, DIM, 5);
    inputs(
        &mut heads,
        15,
        &[("v", &[3, DIM]), ("t", &[3, DIM]), ("w", &[4, DIM])],
    );
    push(
        "vtm_loss",
        oracle()
            .only(["heads.vtm.w", "heads.vtm.b", "v"])
            .run_store(&heads, |g| {
                let v = g.param("v")?;
                vtm_loss(g, v, &[1, 0, 1])
            })?,
    );
    push(
        "contrastive_loss",
        oracle().only(["v", "t"]).run_store(&heads, |g| {
            let (v, t) = (g.param("v")?, g.param("t")?);
            Ok(contrastive_loss(&mut g.tape, v, t, &[true, false, true], 0.07)?.0)
        })?,
    );
    // `w` is behind the stop-gradient; see [`mlm_stop_gradient`].
    let masked = MaskedText {
        token_ids: vec![],
        positions: vec![1, 3],
        originals: vec![2, 4],
        rules: vec![],
    };
    push(
        "vg_mlm_loss",
        oracle()
            .only([
                "heads.mlm.fc1.w",
                "heads.mlm.fc1.b",
                "heads.mlm.fc2.w",
                "heads.mlm.fc2.b",
                "v",
            ])
            .run_store(&heads, |g| {
                let (v, w) = (g.param("v")?, g.param("w")?);
                let v0 = g.tape.slice_rows(v, 0, 1)?;
                let logits = vg_mlm_logits(g, w, &masked.positions, v0)?;
                nll(&mut g.tape, logits, &masked.originals)
            })?,
    );
    Ok(out)
}
