//! Fixtures shared by the benchmarks.

use framegate::synth::{SynthSplit, TRAIN};
use framegate::{ModelConfig, RunConfig, Trainer};

/// The synthetic run at `frames` frames with a small training split.
pub fn run(frames: usize) -> RunConfig {
    RunConfig {
        model: ModelConfig {
            frames,
            ..RunConfig::synthetic().model
        },
        train_episodes: 256,
        test_episodes: 32,
        ..RunConfig::synthetic()
    }
}

pub fn data(run: &RunConfig) -> SynthSplit {
    let m = &run.model;
    SynthSplit::new(
        run.data_seed,
        TRAIN,
        m.dim,
        run.train_episodes,
        m.frames,
        m.patches(),
    )
}

pub fn trainer(run: &RunConfig, data: &SynthSplit) -> Trainer {
    Trainer::new(run.clone(), data.world.clone()).expect("valid fixture config")
}
