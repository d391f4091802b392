//! Joint training loop, AdamW, learning-rate schedule and checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::objectives::{
    contrastive_loss, exchange_annotations, mask_tokens, nll, qa_logits, vg_mlm_logits, vtm_loss,
    BatchItem, MATCHED,
};
use crate::params::ParamStore;
use crate::sampler::gumbel_noise;
use crate::seed::derive;
use crate::synth::{Episode, EpisodeSource, World, MASK, SPECIAL};
use crate::tensor::Tensor;

const EPOCH_KEY: u64 = 0xE90C;
const EXCHANGE_KEY: u64 = 0xE8C4;
const MASK_KEY: u64 = 0x3A5C;
const NOISE_KEY: u64 = 0x6B3E;

/// Decoupled weight decay Adam.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: ParamStore,
    pub v: ParamStore,
}

impl AdamW {
    pub fn new(params: &ParamStore, weight_decay: f64) -> Self {
        let zeros = |s: &ParamStore| {
            let mut z = ParamStore::new();
            for (name, t) in s.iter() {
                z.insert(name, Tensor::zeros(t.shape()));
            }
            z
        };
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }

    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Vec<f64>>,
        lr: f64,
    ) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::ConfigMismatch(format!("no gradient for `{name}`")))?;
            let m = self
                .m
                .get_mut(name)
                .expect("moments track params")
                .data_mut();
            let v = self
                .v
                .get_mut(name)
                .expect("moments track params")
                .data_mut();
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p *= 1.0 - lr * self.weight_decay;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Linear warm-up over `warmup_frac·total` steps, then linear decay to 0.
pub fn lr_at(run: &RunConfig, step: usize) -> f64 {
    let total = run.total_steps().max(1) as f64;
    let warm = (run.warmup_frac * total).ceil();
    let s = step as f64;
    if s < warm {
        run.lr * (s + 1.0) / warm
    } else {
        run.lr * ((total - s) / (total - warm).max(1.0)).max(0.0)
    }
}

/// Gumbel temperature at `step`; with annealing it decays geometrically to 0.5.
pub fn tau_g_at(run: &RunConfig, step: usize) -> f64 {
    let m = &run.model;
    if !m.tau_g_anneal {
        return m.tau_g;
    }
    let frac = step as f64 / run.total_steps().max(1) as f64;
    m.tau_g * (0.5 / m.tau_g).powf(frac)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub l_vtm: f64,
    pub l_cl: f64,
    pub l_vgmlm: f64,
    pub l_qa: f64,
    pub l_total: f64,
    pub lr: f64,
}

/// Episode indices of batch `step` (epoch-wise seeded shuffles).
pub fn batch_indices(run: &RunConfig, len: usize, step: usize) -> Vec<usize> {
    let per_epoch = len.div_ceil(run.batch_size).max(1);
    let (epoch, b) = (step / per_epoch, step % per_epoch);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive(
        run.seed,
        &[EPOCH_KEY, epoch as u64],
    )));
    order[b * run.batch_size..((b + 1) * run.batch_size).min(len)].to_vec()
}

fn finite(step: usize, term: &'static str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NanLoss { step, term })
    }
}

/// Non-finite logits inside a term surface as a NaN loss in that term.
fn within<T>(step: usize, term: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFiniteLogits => Error::NanLoss { step, term },
        e => e,
    })
}

/// Loss values and parameter gradients of one batch.
pub fn batch_gradients(
    model: &Model,
    run: &RunConfig,
    batch: &[Episode],
    step: usize,
) -> Result<(StepMetrics, BTreeMap<String, Vec<f64>>)> {
    let cfg = &model.cfg;
    let tau_g = tau_g_at(run, step);
    let noise = |id: u64, pass: u64| {
        cfg.sampler.is_learned().then(|| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive(run.seed, &[NOISE_KEY, step as u64, id, pass]));
            gumbel_noise(&mut rng, cfg.select * cfg.frames)
        })
    };
    let mut g = model.graph();
    let mut terms: Vec<(&'static str, f64, Var)> = Vec::new();

    if run.w_vtm > 0.0 || run.w_cl > 0.0 || run.w_vgmlm > 0.0 {
        let items = batch
            .iter()
            .map(|e| BatchItem::new(e.caption.clone()))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive(run.seed, &[EXCHANGE_KEY, step as u64]));
        let items = exchange_annotations(items, run.exchange_p, &mut rng);
        let (mut videos, mut texts, mut labels) = (Vec::new(), Vec::new(), Vec::new());
        let (mut mlm_logits, mut mlm_targets) = (Vec::new(), Vec::new());
        for (ep, item) in batch.iter().zip(&items) {
            let words = within(step, "forward", model.text(&mut g, &item.annotation))?;
            let t_cls = g.tape.slice_rows(words, 0, 1)?;
            let z = noise(ep.id, 0);
            let pass = within(
                step,
                "forward",
                model.video(&mut g, &ep.frames, t_cls, z.as_deref(), tau_g),
            )?;
            if item.matched && run.w_vgmlm > 0.0 {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(derive(run.seed, &[MASK_KEY, step as u64, ep.id]));
                let vocab = model.world.vocab.len();
                let masked = mask_tokens(
                    &item.annotation,
                    &mut rng,
                    run.mask_rate,
                    vocab,
                    SPECIAL.len(),
                    MASK,
                )?;
                let mw = within(step, "l_vgmlm", model.text(&mut g, &masked.token_ids))?;
                mlm_logits.push(within(
                    step,
                    "l_vgmlm",
                    vg_mlm_logits(&mut g, mw, &masked.positions, pass.video),
                )?);
                mlm_targets.extend(masked.originals);
            }
            videos.push(pass.video);
            texts.push(t_cls);
            labels.push(if item.matched { MATCHED } else { 1 - MATCHED });
        }
        let v = g.tape.concat_rows(&videos)?;
        if run.w_vtm > 0.0 {
            let l = within(step, "l_vtm", vtm_loss(&mut g, v, &labels))?;
            terms.push(("l_vtm", run.w_vtm, l));
        }
        if run.w_cl > 0.0 {
            let t = g.tape.concat_rows(&texts)?;
            let matched: Vec<bool> = items.iter().map(|i| i.matched).collect();
            let (l, _) = within(
                step,
                "l_cl",
                contrastive_loss(&mut g.tape, v, t, &matched, cfg.tau),
            )?;
            let l = g.tape.scale(l, 1.0 / batch.len() as f64);
            terms.push(("l_cl", run.w_cl, l));
        }
        if !mlm_logits.is_empty() {
            let logits = g.tape.concat_rows(&mlm_logits)?;
            let l = within(step, "l_vgmlm", nll(&mut g.tape, logits, &mlm_targets))?;
            terms.push(("l_vgmlm", run.w_vgmlm, l));
        }
    }
    if run.w_qa > 0.0 {
        let mut videos = Vec::with_capacity(batch.len());
        for ep in batch {
            let words = within(step, "forward", model.text(&mut g, &ep.question))?;
            let t_cls = g.tape.slice_rows(words, 0, 1)?;
            let z = noise(ep.id, 1);
            let pass = model.video(&mut g, &ep.frames, t_cls, z.as_deref(), tau_g);
            videos.push(within(step, "forward", pass)?.video);
        }
        let v = g.tape.concat_rows(&videos)?;
        let logits = qa_logits(&mut g, v)?;
        let answers: Vec<usize> = batch.iter().map(|e| e.answer).collect();
        let l = within(step, "l_qa", nll(&mut g.tape, logits, &answers))?;
        terms.push(("l_qa", run.w_qa, l));
    }

    let mut metrics = StepMetrics {
        step,
        l_vtm: 0.0,
        l_cl: 0.0,
        l_vgmlm: 0.0,
        l_qa: 0.0,
        l_total: 0.0,
        lr: lr_at(run, step),
    };
    let mut total: Option<Var> = None;
    for &(name, w, l) in &terms {
        let value = finite(step, name, g.tape.scalar(l))?;
        match name {
            "l_vtm" => metrics.l_vtm = value,
            "l_cl" => metrics.l_cl = value,
            "l_vgmlm" => metrics.l_vgmlm = value,
            _ => metrics.l_qa = value,
        }
        let wl = g.tape.scale(l, w);
        total = Some(match total {
            Some(t) => g.tape.add(t, wl)?,
            None => wl,
        });
    }
    let Some(total) = total else {
        return Err(Error::InvalidConfig("every loss weight is zero".into()));
    };
    metrics.l_total = finite(step, "l_total", g.tape.scalar(total))?;
    g.tape.backward(total)?;
    Ok((metrics, g.param_grads()))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TrainState {
    step: usize,
    adam_t: u64,
    world_seed: u64,
}

pub struct Trainer {
    pub run: RunConfig,
    pub model: Model,
    pub opt: AdamW,
    /// Next step to run.
    pub step: usize,
}

impl Trainer {
    pub fn new(run: RunConfig, world: World) -> Result<Self> {
        run.validate()?;
        let model = Model::new(run.model.clone(), world, run.seed)?;
        let opt = AdamW::new(&model.params, run.weight_decay);
        Ok(Self {
            run,
            model,
            opt,
            step: 0,
        })
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.run.total_steps()
    }

    pub fn train_step<S: EpisodeSource + ?Sized>(&mut self, data: &S) -> Result<StepMetrics> {
        let idx = batch_indices(&self.run, data.len(), self.step);
        let batch = idx
            .iter()
            .map(|&i| data.episode(i))
            .collect::<Result<Vec<_>>>()?;
        let (metrics, grads) = batch_gradients(&self.model, &self.run, &batch, self.step)?;
        self.opt.step(&mut self.model.params, &grads, metrics.lr)?;
        self.step += 1;
        Ok(metrics)
    }

    /// Trains up to `until` (capped at the configured total), handing every
    /// `log_every`-th step and the last one to `log`.
    pub fn train<S, F>(&mut self, data: &S, until: usize, mut log: F) -> Result<()>
    where
        S: EpisodeSource + ?Sized,
        F: FnMut(&StepMetrics) -> Result<()>,
    {
        if data.is_empty() {
            return Err(Error::InvalidConfig("empty training set".into()));
        }
        let end = until.min(self.run.total_steps());
        while self.step < end {
            let m = self.train_step(data)?;
            let every = self.run.log_every.max(1);
            if m.step % every == 0 || self.step == end {
                log(&m)?;
            }
        }
        Ok(())
    }

    /// `config.json`, `params/`, `optim/{m,v}/` and `state.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.json"), self.run.to_json())?;
        self.model.params.save_dir(&dir.join("params"))?;
        self.opt.m.save_dir(&dir.join("optim").join("m"))?;
        self.opt.v.save_dir(&dir.join("optim").join("v"))?;
        let state = TrainState {
            step: self.step,
            adam_t: self.opt.t,
            world_seed: self.model.world.seed,
        };
        fs::write(
            dir.join("state.json"),
            serde_json::to_string_pretty(&state)?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (run, model) = load_model(dir)?;
        let state: TrainState = serde_json::from_str(&fs::read_to_string(dir.join("state.json"))?)?;
        let mut opt = AdamW::new(&model.params, run.weight_decay);
        let m = ParamStore::load_dir(&dir.join("optim").join("m"))?;
        let v = ParamStore::load_dir(&dir.join("optim").join("v"))?;
        opt.m.check_compatible(&m)?;
        opt.v.check_compatible(&v)?;
        opt.m = m;
        opt.v = v;
        opt.t = state.adam_t;
        Ok(Self {
            run,
            model,
            opt,
            step: state.step,
        })
    }
}

/// Configuration and model of a checkpoint directory.
pub fn load_model(dir: &Path) -> Result<(RunConfig, Model)> {
    let run = RunConfig::from_json(&fs::read_to_string(dir.join("config.json"))?)?;
    let state: TrainState = serde_json::from_str(&fs::read_to_string(dir.join("state.json"))?)?;
    let world = World::new(state.world_seed, run.model.dim);
    let params = ParamStore::load_dir(&dir.join("params"))?;
    let model = Model::with_params(run.model.clone(), world, params)?;
    Ok((run, model))
}
