//! Transformer noise-prediction network.
//!
//! The noisy mask channel is concatenated with the conditioning image
//! channels, cut into non-overlapping patches, linearly projected to tokens
//! and run through a stack of windowed self-attention blocks. Even blocks use
//! unshifted windows, odd blocks cyclically shift the token grid by half a
//! window, so information crosses window boundaries over depth. A projected
//! timestep embedding is added to every token before each block's attention.
//! Two linear heads map the final tokens back to patch pixels: the noise
//! estimate head and the segmentation-logit head.
//!
//! No attention masking is applied across shifted-window boundaries; at these
//! grid sizes the wrap-around mixing is an accepted approximation.

mod net;
mod ops;

pub use net::{denoiser_backward, denoiser_forward, denoiser_forward_cached, ForwardCache};
pub use ops::{
    attention, attention_with_weights, patchify, timestep_embedding, unpatchify, window_merge,
    window_partition,
};

use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use thiserror::Error;

use crate::params::{ParamLayout, ParamVec};
use crate::real::Real;

#[derive(Debug, Error, PartialEq)]
pub enum DenoiserError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("{what}: expected {expected}, got {actual}")]
    ShapeMismatch {
        what: String,
        expected: String,
        actual: String,
    },
    #[error("timestep embedding dimension must be even, got {0}")]
    OddEmbeddingDim(usize),
    #[error("shift {shift} out of range for grid side {side}")]
    ShiftOutOfRange { shift: usize, side: usize },
}

/// Hyperparameters of the denoiser. All array shapes derive from this.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenoiserConfig {
    /// Square image side in pixels.
    pub image_size: usize,
    /// 1 mask channel + condition channels.
    pub in_channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    /// Number of attention blocks.
    pub depth: usize,
    pub num_heads: usize,
    /// Window side in token units.
    pub window_size: usize,
    pub mlp_ratio: f64,
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<(), DenoiserError> {
        let err = |m: String| Err(DenoiserError::InvalidConfig(m));
        if self.image_size == 0
            || self.in_channels == 0
            || self.patch_size == 0
            || self.embed_dim == 0
            || self.depth == 0
            || self.num_heads == 0
            || self.window_size == 0
        {
            return err("all dimensions must be positive".into());
        }
        if !self.mlp_ratio.is_finite() || self.mlp_ratio <= 0.0 {
            return err(format!(
                "mlp_ratio must be positive, got {}",
                self.mlp_ratio
            ));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return err(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        let grid = self.image_size / self.patch_size;
        if !grid.is_multiple_of(self.window_size) {
            return err(format!(
                "token grid side {grid} not divisible by window_size {}",
                self.window_size
            ));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return err(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if !self.embed_dim.is_multiple_of(2) {
            return err(format!(
                "embed_dim {} must be even for the sinusoidal timestep embedding",
                self.embed_dim
            ));
        }
        Ok(())
    }

    /// Token-grid side length (tokens per row).
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Length of a raw patch row: channels × patch_size².
    pub fn patch_dim(&self) -> usize {
        self.in_channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.embed_dim as f64 * self.mlp_ratio).round() as usize).max(1)
    }

    /// The full named-array layout implied by this config.
    pub fn param_layout(&self) -> ParamLayout {
        let d = self.embed_dim;
        let hid = self.mlp_hidden();
        let pp = self.patch_size * self.patch_size;
        let mut shapes: Vec<(String, Vec<usize>)> = vec![
            ("patch_embed.weight".into(), vec![self.patch_dim(), d]),
            ("patch_embed.bias".into(), vec![d]),
            ("pos_embed".into(), vec![self.num_tokens(), d]),
        ];
        for i in 0..self.depth {
            let p = |s: &str| format!("blocks.{i}.{s}");
            shapes.push((p("t_proj.weight"), vec![d, d]));
            shapes.push((p("t_proj.bias"), vec![d]));
            shapes.push((p("norm1.scale"), vec![d]));
            shapes.push((p("norm1.offset"), vec![d]));
            for proj in ["q", "k", "v", "out"] {
                shapes.push((p(&format!("attn.{proj}.weight")), vec![d, d]));
                shapes.push((p(&format!("attn.{proj}.bias")), vec![d]));
            }
            shapes.push((p("norm2.scale"), vec![d]));
            shapes.push((p("norm2.offset"), vec![d]));
            shapes.push((p("mlp.fc1.weight"), vec![d, hid]));
            shapes.push((p("mlp.fc1.bias"), vec![hid]));
            shapes.push((p("mlp.fc2.weight"), vec![hid, d]));
            shapes.push((p("mlp.fc2.bias"), vec![d]));
        }
        shapes.push(("head.weight".into(), vec![d, pp]));
        shapes.push(("head.bias".into(), vec![pp]));
        shapes.push(("seg_head.weight".into(), vec![d, pp]));
        shapes.push(("seg_head.bias".into(), vec![pp]));
        ParamLayout::new(shapes)
    }

    /// Total learnable scalar count; a pure function of the config.
    pub fn param_count(&self) -> usize {
        self.param_layout().total_len()
    }
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            in_channels: 5,
            patch_size: 4,
            embed_dim: 64,
            depth: 4,
            num_heads: 4,
            window_size: 4,
            mlp_ratio: 4.0,
        }
    }
}

/// Tokens on a square grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid<F> {
    pub tokens: Array2<F>,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl<F: Real> TokenGrid<F> {
    pub fn new(tokens: Array2<F>, grid_h: usize, grid_w: usize) -> Result<Self, DenoiserError> {
        if tokens.nrows() != grid_h * grid_w {
            return Err(DenoiserError::ShapeMismatch {
                what: "token grid rows".into(),
                expected: format!("{}", grid_h * grid_w),
                actual: format!("{}", tokens.nrows()),
            });
        }
        Ok(Self {
            tokens,
            grid_h,
            grid_w,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.tokens.ncols()
    }
}

/// Freshly initialized parameters: projections drawn zero-mean with scale
/// 1/√fan_in, normalization at identity, positional embedding small random,
/// noise head all zero so the initial ε̂ is identically zero.
pub fn init_params<F: Real, R: Rng + ?Sized>(
    config: &DenoiserConfig,
    rng: &mut R,
) -> Result<ParamVec<F>, DenoiserError> {
    config.validate()?;
    let layout = Arc::new(config.param_layout());
    let mut params = ParamVec::<F>::zeros(layout);

    let entries: Vec<(String, Vec<usize>)> = params
        .layout()
        .entries()
        .iter()
        .map(|e| (e.name.clone(), e.shape.clone()))
        .collect();
    for (name, shape) in entries {
        let slice = params.slice_mut(&name);
        if name.ends_with(".bias") || name.ends_with(".offset") {
            // zeros
        } else if name.ends_with(".scale") {
            slice.iter_mut().for_each(|v| *v = F::one());
        } else if name == "pos_embed" {
            for v in slice.iter_mut() {
                *v = F::from_f64(0.02 * f64::standard_normal(rng));
            }
        } else if name == "head.weight" {
            // zeros
        } else {
            let fan_in = shape[0] as f64;
            let scale = 1.0 / fan_in.sqrt();
            for v in slice.iter_mut() {
                *v = F::from_f64(scale * f64::standard_normal(rng));
            }
        }
    }
    Ok(params)
}

/// Verify that `params` carries exactly the arrays and shapes the config
/// implies. Returns the first discrepancy, naming the array.
pub fn audit_param_shapes<F: Real>(
    params: &ParamVec<F>,
    config: &DenoiserConfig,
) -> Result<(), DenoiserError> {
    let expected = config.param_layout();
    let actual: Vec<(String, Vec<usize>)> = params
        .layout()
        .entries()
        .iter()
        .map(|e| (e.name.clone(), e.shape.clone()))
        .collect();
    expected
        .audit(&actual)
        .map_err(DenoiserError::InvalidConfig)
}
