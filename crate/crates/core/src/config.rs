//! Run configuration: architecture, objectives, optimizer and data sizes in
//! one flat JSON object so that every field can be overridden by name.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::gate::Fusion;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    /// Gumbel straight-through top-K.
    #[default]
    Sparse,
    /// Evenly spaced frames, no learned selection.
    Uniform,
    /// Convex combinations of dense frames weighted by `y_soft`.
    Soft,
    /// No sampler module; frames are picked as in `Uniform`.
    None,
}

impl SamplerMode {
    pub fn is_learned(self) -> bool {
        matches!(self, Self::Sparse | Self::Soft)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Dense frames per video (N).
    pub frames: usize,
    /// Rows of the sampler's temporal table; 0 means `frames`.
    pub max_frames: usize,
    /// Selected frames (K).
    pub select: usize,
    /// Depth of both the sampler and the refiner stacks (L).
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    /// Patch grid side n; each frame carries n² patches.
    pub patch_side: usize,
    pub mlp_ratio: usize,
    pub tau_g: f64,
    /// Anneal τ_g exponentially to 0.5 over training.
    pub tau_g_anneal: bool,
    /// Contrastive temperature.
    pub tau: f64,
    pub fusion: Fusion,
    pub sampler: SamplerMode,
    /// `false` swaps the refiner for a plain transformer over patches + text.
    pub refiner: bool,
    pub answers: usize,
    /// Std of the frame-scoring head `W_s` at init.
    pub ws_init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frames: 30,
            max_frames: 0,
            select: 4,
            layers: 2,
            dim: 32,
            heads: 2,
            patch_side: 2,
            mlp_ratio: 4,
            tau_g: 1.0,
            tau_g_anneal: false,
            tau: 0.07,
            fusion: Fusion::LaGate,
            sampler: SamplerMode::Sparse,
            refiner: true,
            answers: 8,
            ws_init_std: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn patches(&self) -> usize {
        self.patch_side * self.patch_side
    }

    pub fn table_rows(&self) -> usize {
        if self.max_frames == 0 {
            self.frames
        } else {
            self.max_frames
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            ));
        }
        if self.select == 0 || self.select > self.frames {
            return bad(format!(
                "select {} must be in 1..={}",
                self.select, self.frames
            ));
        }
        if self.layers == 0 || self.patch_side == 0 || self.answers == 0 {
            return bad("layers, patch_side and answers must be positive".into());
        }
        if self.table_rows() < self.frames {
            return Err(Error::TemporalTableTooSmall {
                needed: self.frames,
                available: self.table_rows(),
            });
        }
        if !(self.tau_g > 0.0) || !(self.tau > 0.0) {
            return Err(Error::NonPositiveTemperature);
        }
        Ok(())
    }
}

/// Loss weights over (VG-MLM, VTM, CL) plus the downstream QA head.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub vgmlm: f64,
    pub vtm: f64,
    pub cl: f64,
    pub qa: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            vgmlm: 1.0,
            vtm: 1.0,
            cl: 1.0,
            qa: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(flatten)]
    pub model: ModelConfig,
    pub w_vgmlm: f64,
    pub w_vtm: f64,
    pub w_cl: f64,
    pub w_qa: f64,
    pub exchange_p: f64,
    pub mask_rate: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub epochs: usize,
    /// Optimizer steps; 0 derives them from `epochs`.
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub train_episodes: usize,
    pub test_episodes: usize,
    pub data_seed: u64,
    /// Emit a metrics line every this many steps.
    pub log_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            w_vgmlm: 1.0,
            w_vtm: 1.0,
            w_cl: 1.0,
            w_qa: 1.0,
            exchange_p: 0.5,
            mask_rate: 0.15,
            lr: 3e-5,
            weight_decay: 1e-3,
            warmup_frac: 0.05,
            epochs: 4,
            steps: 0,
            batch_size: 32,
            seed: 1,
            train_episodes: 10_000,
            test_episodes: 1_000,
            data_seed: 7,
            log_every: 50,
        }
    }
}

impl RunConfig {
    /// Settings that train the synthetic task to convergence in a few
    /// minutes on one core.
    pub fn synthetic() -> Self {
        Self {
            lr: 3e-3,
            ..Self::default()
        }
    }

    /// Reference architecture sizes (not trainable at desk scale).
    pub fn reference() -> Self {
        Self {
            model: ModelConfig {
                frames: 100,
                select: 16,
                layers: 3,
                dim: 1024,
                heads: 8,
                patch_side: 7,
                ..ModelConfig::default()
            },
            batch_size: 256,
            ..Self::default()
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            vgmlm: self.w_vgmlm,
            vtm: self.w_vtm,
            cl: self.w_cl,
            qa: self.w_qa,
        }
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.train_episodes.div_ceil(self.batch_size.max(1))
    }

    pub fn total_steps(&self) -> usize {
        if self.steps > 0 {
            self.steps
        } else {
            self.epochs * self.steps_per_epoch()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.exchange_p) || !(0.0..=1.0).contains(&self.mask_rate) {
            return Err(Error::InvalidConfig(
                "probabilities must lie in [0, 1]".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::InvalidConfig(
                "warmup_frac must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(s)?;
        Self::default().with_json_overrides(value)
    }

    /// Applies `key → value` overrides. Values are parsed as JSON when
    /// possible (`3e-3`, `true`, `"sparse"`), else taken as bare strings.
    pub fn with_overrides<'a>(
        &self,
        pairs: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<Self> {
        let mut obj = Map::new();
        for (k, v) in pairs {
            let parsed = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
            obj.insert(k.replace('-', "_"), parsed);
        }
        self.with_json_overrides(Value::Object(obj))
    }

    /// Applies the fields of a JSON object; unknown keys are rejected.
    pub fn with_json_overrides(&self, overrides: Value) -> Result<Self> {
        let Value::Object(overrides) = overrides else {
            return Err(Error::InvalidConfig("config must be a JSON object".into()));
        };
        let Value::Object(mut base) = serde_json::to_value(self)? else {
            unreachable!()
        };
        for (k, v) in overrides {
            if !base.contains_key(&k) {
                return Err(Error::InvalidConfig(format!("unknown config key `{k}`")));
            }
            base.insert(k, v);
        }
        let cfg: Self = serde_json::from_value(Value::Object(base))
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Rows of the module ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    A,
    B,
    C,
    D,
    E,
    F,
}

impl Variant {
    pub const ALL: [Variant; 6] = [Self::A, Self::B, Self::C, Self::D, Self::E, Self::F];

    pub fn label(self) -> &'static str {
        match self {
            Self::A => "a",
            Self::B => "b",
            Self::C => "c",
            Self::D => "d",
            Self::E => "e",
            Self::F => "f",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.label() == s.trim_matches(|c| c == '(' || c == ')'))
    }

    pub fn describe(self) -> &'static str {
        match self {
            Self::A => "no sampler, plain fusion",
            Self::B => "uniform frames + refiner",
            Self::C => "soft selection + refiner",
            Self::D => "sparse sampler, no refiner",
            Self::E => "sparse + refiner, cross-attention fusion",
            Self::F => "full model",
        }
    }

    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let (sampler, refiner, fusion) = match self {
            Self::A => (SamplerMode::None, false, Fusion::LaGate),
            Self::B => (SamplerMode::Uniform, true, Fusion::LaGate),
            Self::C => (SamplerMode::Soft, true, Fusion::LaGate),
            Self::D => (SamplerMode::Sparse, false, Fusion::LaGate),
            Self::E => (SamplerMode::Sparse, true, Fusion::CrossAttention),
            Self::F => (SamplerMode::Sparse, true, Fusion::LaGate),
        };
        ModelConfig {
            sampler,
            refiner,
            fusion,
            ..base.clone()
        }
    }

    /// Objective weights for the loss ablation, over (VG-MLM, VTM, CL).
    pub fn loss_weights(self) -> (f64, f64, f64) {
        match self {
            Self::A => (0.0, 0.0, 0.0),
            Self::B => (1.0, 0.0, 0.0),
            Self::C => (0.0, 1.0, 0.0),
            Self::D => (0.0, 0.0, 1.0),
            Self::E => (1.0, 1.0, 0.0),
            Self::F => (1.0, 1.0, 1.0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_by_flat_key() {
        let cfg = RunConfig::default()
            .with_overrides([
                ("lr", "3e-3"),
                ("sampler", "uniform"),
                ("frames", "90"),
                ("tau-g", "0.5"),
            ])
            .unwrap();
        assert_eq!(cfg.lr, 3e-3);
        assert_eq!(cfg.model.sampler, SamplerMode::Uniform);
        assert_eq!(cfg.model.frames, 90);
        assert_eq!(cfg.model.tau_g, 0.5);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(RunConfig::default()
            .with_overrides([("nope", "1")])
            .is_err());
        assert!(RunConfig::default()
            .with_overrides([("heads", "3")])
            .is_err());
        assert!(RunConfig::default()
            .with_overrides([("select", "31")])
            .is_err());
        assert!(matches!(
            RunConfig::default().with_overrides([("tau_g", "0")]),
            Err(Error::NonPositiveTemperature)
        ));
    }

    #[test]
    fn json_round_trip() {
        let cfg = RunConfig::synthetic();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        let partial =
            RunConfig::from_json(r#"{"select": 2, "fusion": "cross_attention"}"#).unwrap();
        assert_eq!(partial.model.select, 2);
        assert_eq!(partial.model.fusion, Fusion::CrossAttention);
        assert_eq!(partial.lr, 3e-5);
    }

    #[test]
    fn variant_grid() {
        let base = ModelConfig::default();
        assert_eq!(Variant::F.apply(&base), base);
        assert!(!Variant::D.apply(&base).refiner);
        assert_eq!(Variant::E.apply(&base).fusion, Fusion::CrossAttention);
        assert_eq!(Variant::parse("(c)"), Some(Variant::C));
        assert_eq!(Variant::A.loss_weights(), (0.0, 0.0, 0.0));
    }
}
