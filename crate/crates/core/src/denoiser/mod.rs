//! The inflated UNet noise predictor.

pub mod config;
pub mod guidance;
pub mod layers;
pub mod unet;
pub mod weights;

pub use config::DenoiserConfig;
pub use guidance::{guided_spatial_attention, AttentionGuidanceState, AttentionStrategy, ClipGuidance, KvCache};
pub use layers::{temporal_attention, MotionParams, Params};
pub use unet::{forward, inject_structure};
pub use weights::{Model, ParamGroup, Weights};
