//! Mask-conditioned video inpainting with an inflated diffusion UNet,
//! windowed any-length sampling and reference-frame attention guidance.

pub mod conditioning;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod numerics;
pub mod sampler;
pub mod structure;
pub mod training;

pub use conditioning::{ConditionSet, MaskSequence, VideoTensor};
pub use denoiser::{AttentionStrategy, DenoiserConfig, Model};
pub use diffusion::{NoiseSchedule, SamplerConfig, SamplerKind};
pub use error::{Error, Result};
pub use numerics::{Graph, Tensor, Var};
