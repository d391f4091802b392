//! Pretraining objectives (matching, contrastive, vision-guided MLM), the
//! annotation exchange and token masking that feed them, and the answer
//! heads used downstream.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{mismatch, Error, Result};
use crate::gate::NORM_EPS;
use crate::nn::linear;
use crate::ops::argmax;
use crate::params::{Graph, ParamStore};

/// VTM label of a matched pair; exchanged pairs get 0.
pub const MATCHED: usize = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct BatchItem<A> {
    pub annotation: A,
    pub matched: bool,
    pub exchanged_with: Option<usize>,
}

impl<A> BatchItem<A> {
    pub fn new(annotation: A) -> Self {
        Self {
            annotation,
            matched: true,
            exchanged_with: None,
        }
    }
}

/// Flags each item with probability `p`, pairs flagged items in shuffled
/// order and swaps their annotations. An odd flagged item stays matched.
pub fn exchange_annotations<A, R: Rng>(
    mut batch: Vec<BatchItem<A>>,
    p: f64,
    rng: &mut R,
) -> Vec<BatchItem<A>> {
    let mut flagged: Vec<usize> = (0..batch.len())
        .filter(|_| rng.random::<f64>() < p)
        .collect();
    flagged.shuffle(rng);
    for pair in flagged.chunks_exact(2) {
        let (i, j) = (pair[0].min(pair[1]), pair[0].max(pair[1]));
        let (left, right) = batch.split_at_mut(j);
        std::mem::swap(&mut left[i].annotation, &mut right[0].annotation);
        batch[i].matched = false;
        batch[j].matched = false;
        batch[i].exchanged_with = Some(j);
        batch[j].exchanged_with = Some(i);
    }
    batch
}

/// Mean of `−log softmax(logits)[label]` over rows.
pub fn nll(t: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    if labels.len() != t.rows(logits) {
        return Err(mismatch(format!(
            "{} labels for {:?} logits",
            labels.len(),
            t.shape(logits)
        )));
    }
    let ls = t.log_softmax(logits)?;
    let picked = t.pick(ls, labels)?;
    let m = t.mean(picked);
    Ok(t.scale(m, -1.0))
}

pub fn init_vtm_head<R: Rng>(store: &mut ParamStore, rng: &mut R, dim: usize) {
    store.init_linear(rng, "heads.vtm", dim, 2, true);
}

pub fn vtm_logits(g: &mut Graph, v: Var) -> Result<Var> {
    linear(g, v, "heads.vtm")
}

/// Matching loss over video tokens `[B, D]`.
pub fn vtm_loss(g: &mut Graph, v: Var, labels: &[usize]) -> Result<Var> {
    let logits = vtm_logits(g, v)?;
    nll(&mut g.tape, logits, labels)
}

/// `−Σ_{i matched} log softmax_j(cos(v_i, t_j)/τ)[i]`; the softmax runs over
/// every item in the batch. Returns the loss and whether no item was matched
/// (the loss is then a constant 0).
pub fn contrastive_loss(
    t: &mut Tape,
    v: Var,
    text: Var,
    matched: &[bool],
    tau: f64,
) -> Result<(Var, bool)> {
    if !(tau > 0.0) {
        return Err(Error::NonPositiveTemperature);
    }
    let b = t.rows(v);
    if t.rows(text) != b || matched.len() != b || t.cols(v) != t.cols(text) {
        return Err(mismatch(format!(
            "contrastive {:?} vs {:?}",
            t.shape(v),
            t.shape(text)
        )));
    }
    let rows: Vec<usize> = (0..b).filter(|&i| matched[i]).collect();
    if rows.is_empty() {
        return Ok((t.constant(&[1], vec![0.0])?, true));
    }
    let vn = t.normalize_rows(v, NORM_EPS);
    let tn = t.normalize_rows(text, NORM_EPS);
    let sim = t.matmul_nt(vn, tn)?;
    let sim = t.scale(sim, 1.0 / tau);
    let ls = t.log_softmax(sim)?;
    let kept = t.gather_rows(ls, &rows)?;
    let diag = t.pick(kept, &rows)?;
    let s = t.sum(diag);
    Ok((t.scale(s, -1.0), false))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Replacement {
    Mask,
    Random,
    Kept,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedText {
    pub token_ids: Vec<usize>,
    pub positions: Vec<usize>,
    pub originals: Vec<usize>,
    pub rules: Vec<Replacement>,
}

/// BERT-style masking over non-special tokens (ids `< n_special` are never
/// touched). At least one position is masked; the forced one is the
/// first eligible draw from `rng`.
pub fn mask_tokens<R: Rng>(
    tokens: &[usize],
    rng: &mut R,
    mask_rate: f64,
    vocab_size: usize,
    n_special: usize,
    mask_id: usize,
) -> Result<MaskedText> {
    let eligible: Vec<usize> = (0..tokens.len())
        .filter(|&i| tokens[i] >= n_special)
        .collect();
    if eligible.is_empty() {
        return Err(Error::NoMaskedPositions);
    }
    let mut positions: Vec<usize> = eligible
        .iter()
        .copied()
        .filter(|_| rng.random::<f64>() < mask_rate)
        .collect();
    if positions.is_empty() {
        positions.push(eligible[rng.random_range(0..eligible.len())]);
    }
    let mut token_ids = tokens.to_vec();
    let mut rules = Vec::with_capacity(positions.len());
    for &p in &positions {
        let u: f64 = rng.random();
        let rule = if u < 0.8 {
            token_ids[p] = mask_id;
            Replacement::Mask
        } else if u < 0.9 {
            token_ids[p] = rng.random_range(n_special..vocab_size);
            Replacement::Random
        } else {
            Replacement::Kept
        };
        rules.push(rule);
    }
    let originals = positions.iter().map(|&p| tokens[p]).collect();
    Ok(MaskedText {
        token_ids,
        positions,
        originals,
        rules,
    })
}

pub fn init_mlm_head<R: Rng>(store: &mut ParamStore, rng: &mut R, dim: usize, vocab: usize) {
    store.init_linear(rng, "heads.mlm.fc1", 2 * dim, dim, true);
    store.init_linear(rng, "heads.mlm.fc2", dim, vocab, true);
}

/// Vocabulary logits for masked positions, from `[stopgrad(w^M) ; v]`.
///
/// `masked_words` are the encoder outputs of the masked sentence, `v` is the
/// `[1, D]` video token conditioned on the unmasked sentence.
pub fn vg_mlm_logits(g: &mut Graph, masked_words: Var, positions: &[usize], v: Var) -> Result<Var> {
    if positions.is_empty() {
        return Err(Error::NoMaskedPositions);
    }
    let w = g.tape.gather_rows(masked_words, positions)?;
    let w = g.tape.stop_grad(w);
    let vs = g.tape.gather_rows(v, &vec![0; positions.len()])?;
    let x = g.tape.concat_cols(&[w, vs])?;
    let h = linear(g, x, "heads.mlm.fc1")?;
    let h = g.tape.gelu(h);
    linear(g, h, "heads.mlm.fc2")
}

pub fn vg_mlm_loss(g: &mut Graph, masked_words: Var, masked: &MaskedText, v: Var) -> Result<Var> {
    let logits = vg_mlm_logits(g, masked_words, &masked.positions, v)?;
    nll(&mut g.tape, logits, &masked.originals)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub vtm: f64,
    pub vgmlm: f64,
    pub cl: f64,
}

/// Weighted sum `w_vtm·l_vtm + w_vgmlm·l_vgmlm + w_cl·l_cl`.
pub fn total_loss(terms: LossTerms, weights: (f64, f64, f64)) -> Result<f64> {
    for (name, v) in [
        ("l_vtm", terms.vtm),
        ("l_vgmlm", terms.vgmlm),
        ("l_cl", terms.cl),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFiniteTerm(name));
        }
    }
    Ok(weights.0 * terms.vtm + weights.1 * terms.vgmlm + weights.2 * terms.cl)
}

pub fn init_qa_head<R: Rng>(store: &mut ParamStore, rng: &mut R, dim: usize, answers: usize) {
    store.init_linear(rng, "heads.qa.fc1", dim, dim, true);
    store.init_linear(rng, "heads.qa.fc2", dim, answers, true);
}

/// Answer logits from the video token alone; no text enters this head.
pub fn qa_logits(g: &mut Graph, v: Var) -> Result<Var> {
    let h = linear(g, v, "heads.qa.fc1")?;
    let h = g.tape.gelu(h);
    linear(g, h, "heads.qa.fc2")
}

pub fn answer_open_ended(logits: &[f64]) -> usize {
    argmax(logits)
}

/// Candidate whose `MATCHED` logit is highest; `vtm_logits` is `[C × 2]`.
pub fn answer_multichoice(vtm_logits: &[f64]) -> usize {
    let matched: Vec<f64> = vtm_logits.chunks(2).map(|r| r[MATCHED]).collect();
    argmax(&matched)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::GradCheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn nll_of(logits: &[f64], labels: &[usize]) -> f64 {
        let mut t = Tape::new();
        let x = t
            .constant(
                &[labels.len(), logits.len() / labels.len()],
                logits.to_vec(),
            )
            .unwrap();
        let l = nll(&mut t, x, labels).unwrap();
        t.scalar(l)
    }

    #[test]
    fn vtm_anchors() {
        assert!((nll_of(&[0.0, 0.0], &[0]) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((nll_of(&[0.0, 0.0, 0.0, 0.0], &[0, 1]) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(nll_of(&[20.0, -20.0], &[0]) < 1e-8);
        let want = (1.0 + 2f64.exp()).ln();
        assert!((nll_of(&[1.0, 3.0], &[0]) - want).abs() < 1e-12);
        assert!((want - 2.126928).abs() < 1e-6);
    }

    fn cl_of(v: Vec<f64>, t: Vec<f64>, b: usize, matched: &[bool]) -> (f64, bool) {
        let d = v.len() / b;
        let mut tape = Tape::new();
        let vv = tape.constant(&[b, d], v).unwrap();
        let tv = tape.constant(&[b, d], t).unwrap();
        let (l, warn) = contrastive_loss(&mut tape, vv, tv, matched, 0.07).unwrap();
        (tape.scalar(l), warn)
    }

    #[test]
    fn contrastive_anchors() {
        assert_eq!(
            cl_of(vec![0.3, -0.2, 0.5], vec![-1.0, 0.4, 2.0], 1, &[true]),
            (0.0, false)
        );
        let (l, _) = cl_of(
            vec![1.0, 0.0, 0.0, 1.0],
            vec![1.0, 0.0, 0.0, 1.0],
            2,
            &[true, true],
        );
        let want = 2.0 * (1.0 + (-1.0f64 / 0.07).exp()).ln();
        assert!((l - want).abs() < 1e-14, "{l} vs {want}");
        assert!((l - 1.25e-6).abs() < 0.01e-6);
        assert_eq!(
            cl_of(vec![1.0, 2.0, 3.0, 4.0], vec![1.0; 4], 2, &[false, false]),
            (0.0, true)
        );
        // unmatched rows drop out of the sum but stay in the denominator
        let (one, _) = cl_of(
            vec![1.0, 0.0, 0.0, 1.0],
            vec![1.0, 0.0, 0.0, 1.0],
            2,
            &[true, false],
        );
        assert!((one - want / 2.0).abs() < 1e-14);
    }

    #[test]
    fn exchange_rules() {
        let batch = |n: usize| (0..n).map(BatchItem::new).collect::<Vec<_>>();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let same = exchange_annotations(batch(6), 0.0, &mut rng);
        assert!(same
            .iter()
            .enumerate()
            .all(|(i, b)| b.matched && b.annotation == i));
        let both = exchange_annotations(batch(2), 1.0, &mut rng);
        assert_eq!((both[0].annotation, both[1].annotation), (1, 0));
        assert!(!both[0].matched && !both[1].matched);
        let odd = exchange_annotations(batch(3), 1.0, &mut rng);
        assert_eq!(odd.iter().filter(|b| b.matched).count(), 1);
        for b in &odd {
            if let Some(j) = b.exchanged_with {
                assert_eq!(
                    odd[j].exchanged_with.map(|k| odd[k].annotation),
                    Some(b.annotation)
                );
            }
        }
    }

    #[test]
    fn masking_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tokens = [1, 10, 20, 5, 30, 15];
        let m = mask_tokens(&tokens, &mut rng, 0.0, 44, 4, 3).unwrap();
        assert_eq!(m.positions.len(), 1);
        assert_ne!(m.positions[0], 0);
        let all = mask_tokens(&tokens, &mut rng, 1.0, 44, 4, 3).unwrap();
        assert_eq!(all.positions, vec![1, 2, 3, 4, 5]);
        assert_eq!(all.originals, vec![10, 20, 5, 30, 15]);
        assert!(matches!(
            mask_tokens(&[0, 1, 2], &mut rng, 0.5, 44, 4, 3),
            Err(Error::NoMaskedPositions)
        ));
    }

    #[test]
    fn total_and_answers() {
        let t = LossTerms {
            vtm: 0.7,
            vgmlm: 1.2,
            cl: 0.1,
        };
        assert!((total_loss(t, (1.0, 1.0, 1.0)).unwrap() - 2.0).abs() < 1e-15);
        let bad = LossTerms { cl: f64::NAN, ..t };
        assert_eq!(
            total_loss(bad, (1.0, 1.0, 1.0)).unwrap_err().to_string(),
            "non-finite loss term `l_cl`"
        );
        assert_eq!(answer_open_ended(&[0.3]), 0);
        assert_eq!(answer_open_ended(&[0.5, 0.5]), 0);
        assert_eq!(answer_multichoice(&[0.0, 1.0, 0.0, 1.0]), 0);
        assert_eq!(answer_multichoice(&[0.0, -10.0, 0.0, 10.0, 0.0, -10.0]), 1);
    }

    #[test]
    fn losses_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        init_vtm_head(&mut store, &mut rng, 8);
        init_mlm_head(&mut store, &mut rng, 8, 11);
        store.init_normal(&mut rng, "v", &[3, 8], 1.0);
        store.init_normal(&mut rng, "t", &[3, 8], 1.0);
        store.init_normal(&mut rng, "w", &[5, 8], 1.0);
        let masked = MaskedText {
            token_ids: vec![],
            positions: vec![1, 3],
            originals: vec![4, 9],
            rules: vec![],
        };
        let loss = |g: &mut Graph| {
            let v = g.param("v")?;
            let t = g.param("t")?;
            let w = g.param("w")?;
            let a = vtm_loss(g, v, &[1, 0, 1])?;
            let (b, _) = contrastive_loss(&mut g.tape, v, t, &[true, false, true], 0.07)?;
            let v0 = g.tape.slice_rows(v, 0, 1)?;
            let c = vg_mlm_loss(g, w, &masked, v0)?;
            let s = g.tape.add(a, b)?;
            g.tape.add(s, c)
        };
        let checked = store
            .names()
            .filter(|n| *n != "w")
            .map(str::to_string)
            .collect::<Vec<_>>();
        let r = GradCheck::new(1e-5)
            .only(checked)
            .run_store(&store, loss)
            .unwrap();
        assert!(r.pass, "{r:?}");
        // the masked word rows receive nothing through the MLM path
        let mut g = Graph::new(&store);
        let l = loss(&mut g).unwrap();
        g.tape.backward(l).unwrap();
        let grads = g.param_grads();
        assert!(grads["w"].iter().all(|&x| x == 0.0));
        assert!(grads["v"].iter().any(|&x| x != 0.0));
    }

    #[test]
    fn positive_scaling_leaves_contrastive_unchanged() {
        let v: Vec<f64> = (0..12).map(|i| (i as f64 * 0.9).sin()).collect();
        let t: Vec<f64> = (0..12).map(|i| (i as f64 * 0.4).cos()).collect();
        let m = [true, true, false, true];
        let base = cl_of(v.clone(), t.clone(), 4, &m).0;
        for c in [0.25, 2.0, 1024.0] {
            let vs: Vec<f64> = v.iter().map(|x| x * c).collect();
            let ts: Vec<f64> = t.iter().map(|x| x * c).collect();
            assert_eq!(cl_of(vs, ts, 4, &m).0.to_bits(), base.to_bits());
        }
    }
}
