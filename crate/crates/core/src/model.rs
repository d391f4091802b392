//! The assembled pipeline: text encoder, frame sampler, refiner and heads
//! over one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::objectives::{init_mlm_head, init_qa_head, init_vtm_head, qa_logits, vtm_logits};
use crate::ops::argmax;
use crate::params::{Graph, ParamStore};
use crate::refiner::{init_refiner, refine};
use crate::sampler::{init_sampler, select_frames, SampleMask};
use crate::seed::derive;
use crate::synth::World;
use crate::text::{encode_text, init_text_encoder};
use crate::types::FrameBundle;

const INIT_KEY: u64 = 0x1417;

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub world: World,
}

/// Output of one video pass.
pub struct VideoPass {
    /// `v*_cls`, `[1, D]`.
    pub video: Var,
    pub mask: SampleMask,
    /// `y_soft`, `[K, N]`, when the sampler is learned.
    pub soft: Option<Var>,
}

/// Noise-free answer for one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub answer: usize,
    pub logits: Vec<f64>,
    pub indices: Vec<usize>,
    /// `K × N` soft scores; empty for non-learned samplers.
    pub soft: Vec<Vec<f64>>,
}

fn init_params(cfg: &ModelConfig, world: &World, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, &[INIT_KEY]));
    let mut store = ParamStore::new();
    init_text_encoder(&mut store, &mut rng, cfg.dim);
    if cfg.sampler.is_learned() {
        init_sampler(&mut store, &mut rng, cfg);
    }
    init_refiner(&mut store, &mut rng, cfg);
    init_vtm_head(&mut store, &mut rng, cfg.dim);
    init_mlm_head(&mut store, &mut rng, cfg.dim, world.vocab.len());
    init_qa_head(&mut store, &mut rng, cfg.dim, cfg.answers);
    store
}

impl Model {
    pub fn new(cfg: ModelConfig, world: World, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if world.dim != cfg.dim {
            return Err(Error::ConfigMismatch(format!(
                "world width {} vs model width {}",
                world.dim, cfg.dim
            )));
        }
        let params = init_params(&cfg, &world, seed);
        Ok(Self { cfg, params, world })
    }

    /// Wraps loaded parameters after checking them against a fresh init.
    pub fn with_params(cfg: ModelConfig, world: World, params: ParamStore) -> Result<Self> {
        let fresh = Self::new(cfg, world, 0)?;
        fresh.params.check_compatible(&params)?;
        Ok(Self { params, ..fresh })
    }

    pub fn graph(&self) -> Graph<'_> {
        Graph::new(&self.params)
    }

    /// Token outputs `[M, D]`; row 0 is `t_cls`.
    pub fn text(&self, g: &mut Graph, tokens: &[usize]) -> Result<Var> {
        encode_text(g, tokens, &self.world.word_embeddings, self.cfg.heads)
    }

    /// Dense frames → selection → refined video token, conditioned on `text_cls`.
    pub fn video(
        &self,
        g: &mut Graph,
        frames: &FrameBundle,
        text_cls: Var,
        noise: Option<&[f64]>,
        tau_g: f64,
    ) -> Result<VideoPass> {
        let (n, d) = (frames.frames(), frames.dim());
        if n != self.cfg.frames
            || d != self.cfg.dim
            || frames.patches_per_frame() != self.cfg.patches()
        {
            return Err(Error::ConfigMismatch(format!(
                "episode frames {:?} for a model of {} frames × {} patches × {}",
                frames.patches.shape(),
                self.cfg.frames,
                self.cfg.patches(),
                self.cfg.dim
            )));
        }
        let patches = g.tape.constant(
            &[n, frames.patches_per_frame() * d],
            frames.patches.data().to_vec(),
        )?;
        let cls = g.tape.constant(&[n, d], frames.cls.data().to_vec())?;
        let sel = select_frames(g, &self.cfg, patches, cls, text_cls, noise, tau_g)?;
        let video = refine(g, sel.frames, text_cls, &self.cfg)?;
        Ok(VideoPass {
            video,
            mask: sel.mask,
            soft: sel.y_soft,
        })
    }

    /// Video token conditioned on a sentence, noise-free.
    pub fn video_for(
        &self,
        g: &mut Graph,
        frames: &FrameBundle,
        tokens: &[usize],
    ) -> Result<VideoPass> {
        let words = self.text(g, tokens)?;
        let t_cls = g.tape.slice_rows(words, 0, 1)?;
        self.video(g, frames, t_cls, None, self.cfg.tau_g)
    }

    pub fn predict(&self, frames: &FrameBundle, question: &[usize]) -> Result<Prediction> {
        let mut g = self.graph();
        let pass = self.video_for(&mut g, frames, question)?;
        let logits = qa_logits(&mut g, pass.video)?;
        let logits = g.tape.value(logits).to_vec();
        let soft = match pass.soft {
            Some(y) => g
                .tape
                .value(y)
                .chunks(self.cfg.frames)
                .map(<[f64]>::to_vec)
                .collect(),
            None => Vec::new(),
        };
        Ok(Prediction {
            answer: argmax(&logits),
            logits,
            indices: pass.mask.indices,
            soft,
        })
    }

    /// VTM logits `[unmatched, matched]` for one video/sentence pair.
    pub fn match_logits(&self, frames: &FrameBundle, caption: &[usize]) -> Result<[f64; 2]> {
        let mut g = self.graph();
        let pass = self.video_for(&mut g, frames, caption)?;
        let l = vtm_logits(&mut g, pass.video)?;
        let v = g.tape.value(l);
        Ok([v[0], v[1]])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SamplerMode;
    use crate::synth::gen_episode;

    fn small() -> ModelConfig {
        ModelConfig {
            frames: 9,
            select: 3,
            dim: 8,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn init_is_seeded_and_sampler_params_follow_mode() {
        let w = World::new(1, 8);
        let a = Model::new(small(), w.clone(), 4).unwrap();
        let b = Model::new(small(), w.clone(), 4).unwrap();
        assert_eq!(
            a.params.iter().collect::<Vec<_>>(),
            b.params.iter().collect::<Vec<_>>()
        );
        assert!(a.params.contains("sampler.w_s.w"));
        let u = Model::new(
            ModelConfig {
                sampler: SamplerMode::Uniform,
                ..small()
            },
            w,
            4,
        )
        .unwrap();
        assert!(!u.params.contains("sampler.w_s.w"));
    }

    #[test]
    fn predict_shapes_and_mismatch() {
        let w = World::new(1, 8);
        let m = Model::new(small(), w.clone(), 4).unwrap();
        let ep = gen_episode(&w, 0, 3, 9, 4).unwrap();
        let p = m.predict(&ep.frames, &ep.question).unwrap();
        assert_eq!(p.logits.len(), 8);
        assert_eq!(p.indices.len(), 3);
        assert_eq!(p.soft.len(), 3);
        assert!(p
            .soft
            .iter()
            .all(|r| r.len() == 9 && (r.iter().sum::<f64>() - 1.0).abs() < 1e-12));
        assert_eq!(p, m.predict(&ep.frames, &ep.question).unwrap());
        let other = gen_episode(&w, 0, 3, 12, 4).unwrap();
        assert!(matches!(
            m.predict(&other.frames, &ep.question),
            Err(Error::ConfigMismatch(_))
        ));
    }
}
