//! Cross-modal feature fusion with mutual refinement and differential
//! feedback, plus everything needed to exercise it end to end on a desk:
//! a small autodiff kernel, an independent relation-map oracle, a synthetic
//! two-modality scene generator, and a training/evaluation harness.

pub mod cli;
pub mod config;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod harness;
pub mod irdt;
pub mod oracle;
pub mod pe;
pub mod pgm;
pub mod synth;
pub mod tape;
pub mod tensor;

pub use config::CliConfig;
pub use error::{Error, Result};
pub use fusion::{FeatureMapPair, ForwardOptions, FusionConfig, FusionParams, IterationTrace, MergeMode};
pub use harness::{Model, ModelVariant, TrainConfig, TrainReport};
pub use synth::{SceneConfig, SceneSample};
pub use tape::{CallCounters, Mode, ParamId, ParamStore, Parameter, Tape, Var};
pub use tensor::Tensor;
