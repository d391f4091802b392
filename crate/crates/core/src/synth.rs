//! Synthetic video-QA episodes in embedding space.
//!
//! Background patches are `N(0, 1)`. One event frame per video carries an
//! additive shift `3·(u_color + u_shape + u_position)` on every patch, with
//! the `u` drawn from 24 fixed orthonormal directions. The question names an
//! attribute type and the third of the video holding the event; the answer
//! is that attribute's class, so it can only be read off the frames.
//! A frozen random orthogonal map stands in for the image encoder.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::matmul_into;
use crate::error::{Error, Result};
use crate::seed::derive;
use crate::tensor::Tensor;
use crate::types::FrameBundle;

pub const SPECIAL: [&str; 4] = ["[PAD]", "[CLS]", "[SEP]", "[MASK]"];
pub const FUNCTION: [&str; 3] = ["what", "at", "?"];
pub const TYPES: [&str; 3] = ["color", "shape", "position"];
pub const TIMES: [&str; 3] = ["early", "middle", "late"];
pub const COLORS: [&str; 8] = [
    "red", "green", "blue", "yellow", "purple", "orange", "white", "black",
];
pub const SHAPES: [&str; 8] = [
    "circle", "square", "triangle", "star", "cube", "cone", "ring", "cross",
];
pub const POSITIONS: [&str; 8] = [
    "left", "right", "top", "bottom", "center", "upper", "lower", "side",
];

pub const CLASSES: usize = 8;
pub const SHIFT: f64 = 3.0;
pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const MASK: usize = 3;

#[derive(Clone, Debug)]
pub struct Vocab {
    words: Vec<&'static str>,
}

impl Default for Vocab {
    fn default() -> Self {
        let words = SPECIAL
            .iter()
            .chain(&FUNCTION)
            .chain(&TYPES)
            .chain(&TIMES)
            .chain(&COLORS)
            .chain(&SHAPES)
            .chain(&POSITIONS)
            .copied()
            .collect();
        Self { words }
    }
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| *w == word)
    }

    pub fn word(&self, id: usize) -> &'static str {
        self.words[id]
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < SPECIAL.len()
    }

    pub fn encode(&self, sentence: &str) -> Result<Vec<usize>> {
        sentence
            .split_whitespace()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| Error::Format(format!("unknown word `{w}`")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.word(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn question(&self, qtype: usize, window: usize) -> Vec<usize> {
        let s = format!("[CLS] what {} at {} ?", TYPES[qtype], TIMES[window]);
        self.encode(&s)
            .expect("template words are in the vocabulary")
    }

    pub fn caption(&self, attr: [usize; 3], window: usize) -> Vec<usize> {
        let s = format!(
            "[CLS] {} {} at {} {}",
            COLORS[attr[0]], SHAPES[attr[1]], POSITIONS[attr[2]], TIMES[window]
        );
        self.encode(&s)
            .expect("template words are in the vocabulary")
    }
}

/// Seeded constants shared by data and model: attribute directions, the
/// frozen frame projection, and the frozen word embeddings.
#[derive(Clone, Debug)]
pub struct World {
    pub seed: u64,
    pub dim: usize,
    pub directions: Tensor,
    pub projection: Tensor,
    pub word_embeddings: Tensor,
    pub vocab: Vocab,
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Gram–Schmidt on the rows of a random Gaussian matrix.
fn orthonormal_rows(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::with_capacity(rows * dim);
    for r in 0..rows {
        let mut v = normals(rng, dim);
        if r < dim {
            for q in out.chunks(dim) {
                let d: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= d * b);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        out.extend(v.iter().map(|x| x / norm));
    }
    out
}

impl World {
    pub fn new(seed: u64, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, &[0x57_4f_52_4c_44]));
        let vocab = Vocab::default();
        let n_dir = 3 * CLASSES;
        let directions =
            Tensor::matrix(n_dir, dim, orthonormal_rows(&mut rng, n_dir, dim)).expect("shape");
        let projection =
            Tensor::matrix(dim, dim, orthonormal_rows(&mut rng, dim, dim)).expect("shape");
        let word_embeddings =
            Tensor::matrix(vocab.len(), dim, normals(&mut rng, vocab.len() * dim)).expect("shape");
        Self {
            seed,
            dim,
            directions,
            projection,
            word_embeddings,
            vocab,
        }
    }

    /// The stand-in image encoder: `patches · P` and `mean_p(patches) · P`.
    /// Raw frames are `[N, n², D]`.
    pub fn encode_frames(&self, raw: &Tensor) -> Result<FrameBundle> {
        let s = raw.shape();
        if s.len() != 3 || s[2] != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "raw frames {s:?} for width {}",
                self.dim
            )));
        }
        let (n, p, d) = (s[0], s[1], s[2]);
        let mut patches = vec![0.0; n * p * d];
        matmul_into(
            raw.data(),
            self.projection.data(),
            &mut patches,
            n * p,
            d,
            d,
        );
        let mut means = vec![0.0; n * d];
        for f in 0..n {
            for q in 0..p {
                let row = &raw.data()[(f * p + q) * d..(f * p + q + 1) * d];
                means[f * d..(f + 1) * d]
                    .iter_mut()
                    .zip(row)
                    .for_each(|(m, x)| *m += x);
            }
        }
        means.iter_mut().for_each(|m| *m /= p as f64);
        let mut cls = vec![0.0; n * d];
        matmul_into(&means, self.projection.data(), &mut cls, n, d, d);
        FrameBundle::new(
            Tensor::new(vec![n, p, d], patches)?,
            Tensor::matrix(n, d, cls)?,
        )
    }

    /// Sum of the three attribute directions, scaled by [`SHIFT`].
    pub fn event_shift(&self, attr: [usize; 3]) -> Vec<f64> {
        let mut shift = vec![0.0; self.dim];
        for (group, &a) in attr.iter().enumerate() {
            let u = self.directions.row(group * CLASSES + a);
            shift.iter_mut().zip(u).for_each(|(s, x)| *s += SHIFT * x);
        }
        shift
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub id: u64,
    pub seed: u64,
    pub frames: FrameBundle,
    pub question: Vec<usize>,
    pub caption: Vec<usize>,
    pub answer: usize,
    pub event_frame: usize,
    pub event_attr: [usize; 3],
    pub qtype: usize,
    pub window: usize,
}

/// Frame range `[lo, hi)` of window `w` (early/middle/late thirds).
pub fn window_range(frames: usize, w: usize) -> (usize, usize) {
    (w * frames / 3, (w + 1) * frames / 3)
}

pub fn gen_episode(
    world: &World,
    id: u64,
    seed: u64,
    frames: usize,
    patches: usize,
) -> Result<Episode> {
    if frames < 3 {
        return Err(Error::InvalidConfig(format!(
            "need at least 3 frames, got {frames}"
        )));
    }
    let d = world.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut raw = normals(&mut rng, frames * patches * d);
    let event_attr = [
        rng.random_range(0..CLASSES),
        rng.random_range(0..CLASSES),
        rng.random_range(0..CLASSES),
    ];
    let window = rng.random_range(0..3);
    let (lo, hi) = window_range(frames, window);
    let event_frame = rng.random_range(lo..hi);
    let qtype = rng.random_range(0..3);
    let shift = world.event_shift(event_attr);
    for q in 0..patches {
        let row = &mut raw[(event_frame * patches + q) * d..(event_frame * patches + q + 1) * d];
        row.iter_mut().zip(&shift).for_each(|(x, s)| *x += s);
    }
    let frames_bundle = world.encode_frames(&Tensor::new(vec![frames, patches, d], raw)?)?;
    Ok(Episode {
        id,
        seed,
        frames: frames_bundle,
        question: world.vocab.question(qtype, window),
        caption: world.vocab.caption(event_attr, window),
        answer: event_attr[qtype],
        event_frame,
        event_attr,
        qtype,
        window,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlindMode {
    Static,
    Gaussian,
}

impl BlindMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(Self::Static),
            "gaussian" => Ok(Self::Gaussian),
            other => Err(Error::UnknownBlindMode(other.to_string())),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Static => "static",
            Self::Gaussian => "gaussian",
        }
    }
}

/// Replaces the visual input while keeping question and answer.
pub fn blind_input(
    world: &World,
    episode: &Episode,
    mode: BlindMode,
    seed: u64,
) -> Result<Episode> {
    let f = &episode.frames;
    let (n, p, d) = (f.frames(), f.patches_per_frame(), f.dim());
    let frames = match mode {
        BlindMode::Static => {
            let first = f.frame(0).to_vec();
            let cls0 = f.cls.row(0).to_vec();
            FrameBundle::new(
                Tensor::new(vec![n, p, d], first.repeat(n))?,
                Tensor::matrix(n, d, cls0.repeat(n))?,
            )?
        }
        BlindMode::Gaussian => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            world.encode_frames(&Tensor::new(vec![n, p, d], normals(&mut rng, n * p * d))?)?
        }
    };
    Ok(Episode {
        frames,
        ..episode.clone()
    })
}

/// Episodes addressed by index, generated or loaded on demand.
pub trait EpisodeSource {
    fn len(&self) -> usize;
    fn episode(&self, i: usize) -> Result<Episode>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Deterministic on-the-fly generator; episode `i` has seed `derive(base, i)`.
#[derive(Clone, Debug)]
pub struct SynthSplit {
    pub world: World,
    pub base_seed: u64,
    pub count: usize,
    pub frames: usize,
    pub patches: usize,
}

/// Split keys under the data seed.
pub const TRAIN: u64 = 0;
pub const TEST: u64 = 1;

impl SynthSplit {
    /// Split `key` of the dataset defined by `data_seed`; the world shares that seed.
    pub fn new(
        data_seed: u64,
        key: u64,
        dim: usize,
        count: usize,
        frames: usize,
        patches: usize,
    ) -> Self {
        Self {
            world: World::new(data_seed, dim),
            base_seed: derive(data_seed, &[key]),
            count,
            frames,
            patches,
        }
    }

    pub fn seed_of(&self, i: usize) -> u64 {
        derive(self.base_seed, &[i as u64])
    }
}

impl EpisodeSource for SynthSplit {
    fn len(&self) -> usize {
        self.count
    }

    fn episode(&self, i: usize) -> Result<Episode> {
        gen_episode(
            &self.world,
            i as u64,
            self.seed_of(i),
            self.frames,
            self.patches,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub episode_id: u64,
    pub seed: u64,
    pub answer: usize,
    pub event_frame: usize,
    pub event_attr: [usize; 3],
    pub qtype: usize,
    pub window: usize,
    pub question: Vec<usize>,
    pub caption: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub frames: usize,
    pub patches: usize,
    pub dim: usize,
    pub world_seed: u64,
    pub base_seed: u64,
    pub count: usize,
}

/// A dataset directory: `index.json`, `dataset.json`, and per-episode
/// `<id>.patches.tdmp` / `<id>.cls.tdmp`.
#[derive(Clone, Debug)]
pub struct DiskSplit {
    pub dir: PathBuf,
    pub meta: DatasetMeta,
    pub index: Vec<IndexEntry>,
}

fn episode_paths(dir: &Path, id: u64) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("{id:06}.patches.tdmp")),
        dir.join(format!("{id:06}.cls.tdmp")),
    )
}

impl DiskSplit {
    pub fn write(dir: &Path, source: &SynthSplit) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let mut index = Vec::with_capacity(source.len());
        for i in 0..source.len() {
            let ep = source.episode(i)?;
            let (p, c) = episode_paths(dir, ep.id);
            ep.frames.patches.save(p)?;
            ep.frames.cls.save(c)?;
            index.push(IndexEntry {
                episode_id: ep.id,
                seed: ep.seed,
                answer: ep.answer,
                event_frame: ep.event_frame,
                event_attr: ep.event_attr,
                qtype: ep.qtype,
                window: ep.window,
                question: ep.question,
                caption: ep.caption,
            });
        }
        let meta = DatasetMeta {
            frames: source.frames,
            patches: source.patches,
            dim: source.world.dim,
            world_seed: source.world.seed,
            base_seed: source.base_seed,
            count: source.count,
        };
        fs::write(
            dir.join("index.json"),
            serde_json::to_string_pretty(&index)?,
        )?;
        fs::write(
            dir.join("dataset.json"),
            serde_json::to_string_pretty(&meta)?,
        )?;
        Ok(Self {
            dir: dir.to_path_buf(),
            meta,
            index,
        })
    }

    pub fn open(dir: &Path) -> Result<Self> {
        let index: Vec<IndexEntry> =
            serde_json::from_str(&fs::read_to_string(dir.join("index.json"))?)?;
        let meta: DatasetMeta =
            serde_json::from_str(&fs::read_to_string(dir.join("dataset.json"))?)?;
        if index.len() != meta.count {
            return Err(Error::Format(format!(
                "index has {} entries, meta says {}",
                index.len(),
                meta.count
            )));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            meta,
            index,
        })
    }

    /// The world the episodes were generated in (needed for word embeddings).
    pub fn world(&self) -> World {
        World::new(self.meta.world_seed, self.meta.dim)
    }
}

impl EpisodeSource for DiskSplit {
    fn len(&self) -> usize {
        self.index.len()
    }

    fn episode(&self, i: usize) -> Result<Episode> {
        let e = &self.index[i];
        let (p, c) = episode_paths(&self.dir, e.episode_id);
        let frames = FrameBundle::new(Tensor::load(p)?, Tensor::load(c)?)?;
        if frames.frames() != self.meta.frames || frames.dim() != self.meta.dim {
            return Err(Error::Format(format!(
                "episode {} has shape {:?}",
                e.episode_id,
                frames.patches.shape()
            )));
        }
        Ok(Episode {
            id: e.episode_id,
            seed: e.seed,
            frames,
            question: e.question.clone(),
            caption: e.caption.clone(),
            answer: e.answer,
            event_frame: e.event_frame,
            event_attr: e.event_attr,
            qtype: e.qtype,
            window: e.window,
        })
    }
}

impl<T: EpisodeSource + ?Sized> EpisodeSource for &T {
    fn len(&self) -> usize {
        (**self).len()
    }

    fn episode(&self, i: usize) -> Result<Episode> {
        (**self).episode(i)
    }
}

impl EpisodeSource for Vec<Episode> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn episode(&self, i: usize) -> Result<Episode> {
        Ok(self[i].clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> World {
        World::new(7, 32)
    }

    #[test]
    fn vocabulary_and_templates() {
        let v = Vocab::default();
        assert_eq!(v.len(), 37);
        assert_eq!(v.decode(&v.question(1, 2)), "[CLS] what shape at late ?");
        assert_eq!(
            v.decode(&v.caption([0, 3, 4], 0)),
            "[CLS] red star at center early"
        );
        assert!(v.encode("what is").is_err());
    }

    #[test]
    fn world_is_orthonormal_and_seeded() {
        let w = world();
        let d = w.directions.data();
        for i in 0..24 {
            for j in 0..24 {
                let dot: f64 = (0..32).map(|k| d[i * 32 + k] * d[j * 32 + k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-12);
            }
        }
        assert_eq!(World::new(7, 32).word_embeddings, w.word_embeddings);
        assert_ne!(World::new(8, 32).word_embeddings, w.word_embeddings);
    }

    #[test]
    fn episode_is_deterministic_and_consistent() {
        let w = world();
        let a = gen_episode(&w, 3, 99, 30, 4).unwrap();
        assert_eq!(a, gen_episode(&w, 3, 99, 30, 4).unwrap());
        let (lo, hi) = window_range(30, a.window);
        assert!((lo..hi).contains(&a.event_frame));
        assert_eq!(a.answer, a.event_attr[a.qtype]);
        assert!(!a
            .question
            .contains(&w.vocab.id(COLORS[a.event_attr[0]]).unwrap()));
        assert_eq!(a.frames.patches.shape(), &[30, 4, 32]);
    }

    #[test]
    fn blind_modes() {
        let w = world();
        let ep = gen_episode(&w, 0, 5, 12, 4).unwrap();
        let s = blind_input(&w, &ep, BlindMode::Static, 1).unwrap();
        assert!((1..12).all(|f| s.frames.cls.row(f) == s.frames.cls.row(0)));
        assert_eq!(s.answer, ep.answer);
        let g1 = blind_input(&w, &ep, BlindMode::Gaussian, 4).unwrap();
        assert_eq!(g1, blind_input(&w, &ep, BlindMode::Gaussian, 4).unwrap());
        assert_ne!(g1.frames, ep.frames);
        assert_eq!(
            BlindMode::parse("noise").unwrap_err().to_string(),
            "unknown blind mode `noise`"
        );
    }

    #[test]
    fn disk_round_trip() {
        let split = SynthSplit {
            world: world(),
            base_seed: 3,
            count: 4,
            frames: 6,
            patches: 4,
        };
        let dir = tempfile::tempdir().unwrap();
        DiskSplit::write(dir.path(), &split).unwrap();
        let disk = DiskSplit::open(dir.path()).unwrap();
        assert_eq!(disk.len(), 4);
        for i in 0..4 {
            assert_eq!(disk.episode(i).unwrap(), split.episode(i).unwrap());
        }
    }
}
