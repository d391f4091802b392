pub mod ablate;
pub mod autodiff;
pub mod checks;
pub mod config;
pub mod error;
pub mod eval;
pub mod gate;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod ops;
pub mod params;
pub mod refiner;
pub mod sampler;
pub mod seed;
pub mod synth;
pub mod tensor;
pub mod text;
pub mod train;
pub mod types;

pub use autodiff::{Tape, Var};
pub use config::{ModelConfig, RunConfig, SamplerMode, Variant};
pub use error::{Error, Result};
pub use gate::Fusion;
pub use gradcheck::{grad_check, GradCheck, GradReport};
pub use model::Model;
pub use params::{Graph, ParamStore};
pub use sampler::SampleMask;
pub use tensor::Tensor;
pub use train::{StepMetrics, Trainer};
pub use types::{FrameBundle, TextBundle};
