//! Transformer-backed denoising diffusion for binary tumor segmentation.
//!
//! The pipeline: a forward Gaussian chain corrupts a mask field, a windowed
//! vision-transformer denoiser learns to predict the injected noise given the
//! conditioning image channels, and ancestral reverse sampling turns a trained
//! denoiser plus an image into a per-pixel probability map and binary mask.
//! Supporting modules cover the composite segmentation loss, synthetic phantom
//! data with volume IO, the training loop with checkpoints, and evaluation
//! metrics with brute-force-verifiable definitions.

pub mod data;
pub mod denoiser;
pub mod distance;
pub mod losses;
pub mod metrics;
pub mod params;
pub mod real;
pub mod sampler;
pub mod schedule;
pub mod training;

pub use data::Sample;
pub use denoiser::{DenoiserConfig, TokenGrid};
pub use losses::{GroundTruth, LossWeights};
pub use metrics::EvalReport;
pub use params::{ParamLayout, ParamVec};
pub use sampler::MaskPrediction;
pub use schedule::{make_linear_schedule, NoiseSchedule};
pub use training::{Checkpoint, TrainConfig};
