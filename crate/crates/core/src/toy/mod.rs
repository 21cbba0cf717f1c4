//! Grid-scene question answering model: a small pre-LN decoder over patch
//! tokens followed by text tokens.

pub mod config;
pub mod generate;
pub mod model;
pub mod scene;
pub mod train;
pub mod vocab;

pub use config::ModelConfig;
pub use generate::{DecodeOptions, GenerationTrace};
pub use model::{mask_patches, ModelInput, ToyModel};
pub use scene::{Distribution, QaSample, Question, Scene};
