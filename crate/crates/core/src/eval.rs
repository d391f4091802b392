//! Evaluation: open-ended QA, sampler hit rate, blinded inputs, matching
//! and multiple choice.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::objectives::{answer_multichoice, MATCHED};
use crate::sampler::uniform_indices;
use crate::seed::derive;
use crate::synth::{blind_input, window_range, BlindMode, EpisodeSource, CLASSES};

const BLIND_KEY: u64 = 0xB11D;
const MCQ_KEY: u64 = 0x3C0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlindReport {
    pub mode: BlindMode,
    pub accuracy: f64,
    /// Blind accuracy minus sighted accuracy.
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub chance: f64,
    pub qa_accuracy: f64,
    pub hit_rate: f64,
    pub blind: Vec<BlindReport>,
    pub vtm_accuracy: Option<f64>,
    pub mcq_accuracy: Option<f64>,
}

impl EvalReport {
    pub fn blind_accuracy(&self, mode: BlindMode) -> Option<f64> {
        self.blind
            .iter()
            .find(|b| b.mode == mode)
            .map(|b| b.accuracy)
    }
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub blind: Vec<BlindMode>,
    /// Also score matching and multiple choice (several extra passes per episode).
    pub matching: bool,
    pub choices: usize,
    pub seed: u64,
    /// Evaluate at most this many episodes (0 = all).
    pub limit: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            blind: vec![BlindMode::Static, BlindMode::Gaussian],
            matching: true,
            choices: 5,
            seed: 0,
            limit: 0,
        }
    }
}

/// Expected hit rate of evenly spaced selection when the event frame is
/// uniform within a uniformly chosen third of the video.
pub fn uniform_hit_rate(frames: usize, select: usize) -> Result<f64> {
    let idx = uniform_indices(frames, select)?;
    let mut total = 0.0;
    for w in 0..3 {
        let (lo, hi) = window_range(frames, w);
        total += idx.iter().filter(|&&i| (lo..hi).contains(&i)).count() as f64 / (hi - lo) as f64;
    }
    Ok(total / 3.0)
}

/// `n` distinct attribute triples, all different from `truth`.
fn distractors<R: Rng>(rng: &mut R, truth: [usize; 3], n: usize) -> Vec<[usize; 3]> {
    let mut out: Vec<[usize; 3]> = Vec::with_capacity(n);
    while out.len() < n {
        let a = [
            rng.random_range(0..CLASSES),
            rng.random_range(0..CLASSES),
            rng.random_range(0..CLASSES),
        ];
        if a != truth && !out.contains(&a) {
            out.push(a);
        }
    }
    out
}

pub fn evaluate<S: EpisodeSource + ?Sized>(
    model: &Model,
    data: &S,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let n = if opts.limit == 0 {
        data.len()
    } else {
        opts.limit.min(data.len())
    };
    if n == 0 {
        return Err(Error::InvalidConfig("empty evaluation set".into()));
    }
    if opts.matching && opts.choices < 2 {
        return Err(Error::InvalidConfig(
            "multiple choice needs at least 2 candidates".into(),
        ));
    }
    let vocab = &model.world.vocab;
    let (mut correct, mut hits) = (0usize, 0usize);
    let mut blind_correct = vec![0usize; opts.blind.len()];
    let (mut vtm_correct, mut vtm_total, mut mcq_correct) = (0usize, 0usize, 0usize);
    for i in 0..n {
        let ep = data.episode(i)?;
        let p = model.predict(&ep.frames, &ep.question)?;
        correct += (p.answer == ep.answer) as usize;
        hits += p.indices.contains(&ep.event_frame) as usize;
        for (b, &mode) in opts.blind.iter().enumerate() {
            let blind = blind_input(
                &model.world,
                &ep,
                mode,
                derive(opts.seed, &[BLIND_KEY, ep.id]),
            )?;
            blind_correct[b] +=
                (model.predict(&blind.frames, &blind.question)?.answer == ep.answer) as usize;
        }
        if !opts.matching {
            continue;
        }
        let own = model.match_logits(&ep.frames, &ep.caption)?;
        vtm_correct += (own[MATCHED] > own[1 - MATCHED]) as usize;
        vtm_total += 1;
        if n > 1 {
            let other = data.episode((i + 1) % n)?;
            if other.caption != ep.caption {
                let l = model.match_logits(&ep.frames, &other.caption)?;
                vtm_correct += (l[MATCHED] < l[1 - MATCHED]) as usize;
                vtm_total += 1;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive(opts.seed, &[MCQ_KEY, ep.id]));
        let truth_at = rng.random_range(0..opts.choices);
        let mut wrong = distractors(&mut rng, ep.event_attr, opts.choices - 1).into_iter();
        let mut logits = Vec::with_capacity(2 * opts.choices);
        for c in 0..opts.choices {
            let l = if c == truth_at {
                own
            } else {
                let caption = vocab.caption(wrong.next().expect("enough distractors"), ep.window);
                model.match_logits(&ep.frames, &caption)?
            };
            logits.extend(l);
        }
        mcq_correct += (answer_multichoice(&logits) == truth_at) as usize;
    }
    let frac = |c: usize| c as f64 / n as f64;
    let qa = frac(correct);
    Ok(EvalReport {
        episodes: n,
        chance: 1.0 / model.cfg.answers as f64,
        qa_accuracy: qa,
        hit_rate: frac(hits),
        blind: opts
            .blind
            .iter()
            .zip(&blind_correct)
            .map(|(&mode, &c)| BlindReport {
                mode,
                accuracy: frac(c),
                delta: frac(c) - qa,
            })
            .collect(),
        vtm_accuracy: opts.matching.then(|| vtm_correct as f64 / vtm_total as f64),
        mcq_accuracy: opts.matching.then(|| frac(mcq_correct)),
    })
}
