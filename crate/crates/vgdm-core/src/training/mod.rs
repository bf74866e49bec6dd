//! Optimization loop binding schedule, denoiser and losses, plus checkpoint
//! persistence and the finite-difference verification harness.
//!
//! Training runs in `f32`; the same loss/gradient code instantiates at `f64`
//! for verification. Per step and batch item: draw `t` uniformly, noise the
//! ±1-scaled mask with the closed-form marginal, predict the noise, and
//! optimize `MSE(ε̂, ε)` plus the composite segmentation loss applied to the
//! probability map implied by the de-noised estimate
//! `x̂0 = (x_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t`, `prob = logistic(x̂0/2)`.

mod checkpoint;
mod fdcheck;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, sha256_hex, Checkpoint, CheckpointError, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use fdcheck::{finite_difference_check, FdGroupReport, FdReport};

use std::sync::Arc;
use std::time::Instant;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::Sample;
use crate::denoiser::{
    denoiser_backward, denoiser_forward_cached, init_params, DenoiserConfig, DenoiserError,
};
use crate::losses::{
    composite_loss_grad, composite_loss_terms, CompositeTerms, GroundTruth, LossError, LossWeights,
};
use crate::params::ParamVec;
use crate::real::Real;
use crate::schedule::{make_linear_schedule, q_sample, NoiseSchedule, ScheduleError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss in term '{term}' at step {step}")]
    NonFiniteLoss { term: &'static str, step: usize },
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// EMA decay for the parameter shadow; 0 keeps the shadow equal to the
    /// raw parameters.
    pub ema_decay: f64,
    pub loss_weights: LossWeights,
    pub dice_smooth: f64,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 4,
            learning_rate: 2e-4,
            ema_decay: 0.995,
            loss_weights: LossWeights::default(),
            dice_smooth: 1.0,
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            seed: 0,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: String| Err(TrainError::InvalidConfig(m));
        if self.steps < 1 {
            return err("steps must be >= 1".into());
        }
        if self.batch_size < 1 {
            return err("batch_size must be >= 1".into());
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return err(format!("learning_rate {} must be > 0", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return err(format!("ema_decay {} must lie in [0, 1)", self.ema_decay));
        }
        if self.log_every < 1 {
            return err("log_every must be >= 1".into());
        }
        if !self.dice_smooth.is_finite() || self.dice_smooth < 0.0 {
            return err(format!("dice_smooth {} must be >= 0", self.dice_smooth));
        }
        self.loss_weights
            .validate()
            .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        make_linear_schedule(self.timesteps, self.beta_start, self.beta_end)?;
        Ok(())
    }

    pub fn schedule(&self) -> NoiseSchedule {
        make_linear_schedule(self.timesteps, self.beta_start, self.beta_end)
            .expect("validated schedule settings")
    }
}

/// A sample prepared for training: conditioning channels, the mask scaled to
/// a ±1 field, and the ground truth with its signed distance map.
#[derive(Debug, Clone)]
pub struct TrainItem<F> {
    pub condition: Array3<F>,
    pub x0: Array2<F>,
    pub gt: GroundTruth<F>,
}

impl<F: Real> TrainItem<F> {
    pub fn from_sample(sample: &Sample) -> Self {
        let condition = sample.image.mapv(|v| F::from_f64(v as f64));
        let two = F::from_f64(2.0);
        let x0 = sample.mask.mapv(|m| F::from_f64(m as f64) * two - F::one());
        let gt = GroundTruth::from_mask(sample.mask.clone());
        Self { condition, x0, gt }
    }
}

/// Per-term scalars of one diffusion training loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct DiffusionLossParts<F> {
    pub mse: F,
    pub composite: CompositeTerms<F>,
    pub total: F,
}

fn logistic<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

struct LossEval<F> {
    parts: DiffusionLossParts<F>,
    eps_hat: Array2<F>,
    prob: Array2<F>,
    cache: crate::denoiser::ForwardCache<F>,
}

#[allow(clippy::too_many_arguments)]
fn eval_item<F: Real>(
    item: &TrainItem<F>,
    t: usize,
    eps: &Array2<F>,
    params: &ParamVec<F>,
    config: &DenoiserConfig,
    schedule: &NoiseSchedule,
    weights: &LossWeights,
    smooth: F,
) -> Result<LossEval<F>, TrainError> {
    let x_t = q_sample(&item.x0, t, eps, schedule)?;
    let (eps_hat, _features, cache) =
        denoiser_forward_cached(&x_t, &item.condition, t, params, config)?;

    let n = F::from_f64(eps.len() as f64);
    let mut mse = F::zero();
    for (a, b) in eps_hat.iter().zip(eps.iter()) {
        let d = *a - *b;
        mse = mse + d * d;
    }
    mse = mse / n;

    let ab = schedule.alpha_bar(t);
    let sa = F::from_f64(ab.sqrt());
    let sb = F::from_f64((1.0 - ab).sqrt());
    let half = F::from_f64(0.5);
    let x0_hat = (&x_t - &eps_hat.mapv(|v| v * sb)).mapv(|v| v / sa);
    let prob = x0_hat.mapv(|v| logistic(v * half));
    let composite = composite_loss_terms(&prob, &item.gt, weights, smooth)?;
    let total = mse + composite.total;
    Ok(LossEval {
        parts: DiffusionLossParts {
            mse,
            composite,
            total,
        },
        eps_hat,
        prob,
        cache,
    })
}

/// Loss terms for one item at a fixed `(t, eps)` draw. Deterministic; the
/// `f64` instantiation is the verification mode.
#[allow(clippy::too_many_arguments)]
pub fn diffusion_item_loss<F: Real>(
    item: &TrainItem<F>,
    t: usize,
    eps: &Array2<F>,
    params: &ParamVec<F>,
    config: &DenoiserConfig,
    schedule: &NoiseSchedule,
    weights: &LossWeights,
    smooth: F,
) -> Result<DiffusionLossParts<F>, TrainError> {
    eval_item(item, t, eps, params, config, schedule, weights, smooth).map(|e| e.parts)
}

/// Loss terms plus the full parameter gradient for one item at a fixed
/// `(t, eps)` draw.
#[allow(clippy::too_many_arguments)]
pub fn diffusion_item_gradient<F: Real>(
    item: &TrainItem<F>,
    t: usize,
    eps: &Array2<F>,
    params: &ParamVec<F>,
    config: &DenoiserConfig,
    schedule: &NoiseSchedule,
    weights: &LossWeights,
    smooth: F,
) -> Result<(DiffusionLossParts<F>, ParamVec<F>), TrainError> {
    let eval = eval_item(item, t, eps, params, config, schedule, weights, smooth)?;

    // d(mse)/d(eps_hat) = 2 (eps_hat - eps) / n
    let n = F::from_f64(eps.len() as f64);
    let two = F::from_f64(2.0);
    let mut d_eps_hat = Array2::<F>::zeros(eps.raw_dim());
    for ((d, a), b) in d_eps_hat
        .iter_mut()
        .zip(eval.eps_hat.iter())
        .zip(eps.iter())
    {
        *d = two * (*a - *b) / n;
    }

    // Composite path: prob = logistic(x0_hat / 2),
    // x0_hat = (x_t - sqrt(1 - ab) eps_hat) / sqrt(ab).
    let ab = schedule.alpha_bar(t);
    let sa = F::from_f64(ab.sqrt());
    let sb = F::from_f64((1.0 - ab).sqrt());
    let half = F::from_f64(0.5);
    let d_comp = composite_loss_grad(&eval.prob, &item.gt, weights, smooth)?;
    let chain = -sb / sa * half;
    for ((d, p), c) in d_eps_hat
        .iter_mut()
        .zip(eval.prob.iter())
        .zip(d_comp.iter())
    {
        let sig_prime = *p * (F::one() - *p);
        *d = *d + *c * sig_prime * chain;
    }

    let grads = denoiser_backward(&eval.cache, &d_eps_hat, None, params, config)?;
    Ok((eval.parts, grads))
}

/// Adaptive-moment optimizer state (decoupled weight decay fixed at 0).
#[derive(Debug, Clone)]
pub struct AdamState<F> {
    pub m: ParamVec<F>,
    pub v: ParamVec<F>,
    pub step: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl<F: Real> AdamState<F> {
    pub fn new(layout: Arc<crate::params::ParamLayout>) -> Self {
        Self {
            m: ParamVec::zeros(Arc::clone(&layout)),
            v: ParamVec::zeros(layout),
            step: 0,
        }
    }

    /// One optimizer step: `p -= lr · m̂ / (√v̂ + ε)` with bias correction.
    pub fn update(&mut self, params: &mut ParamVec<F>, grads: &ParamVec<F>, lr: f64) {
        self.step += 1;
        let b1 = F::from_f64(ADAM_BETA1);
        let b2 = F::from_f64(ADAM_BETA2);
        let one = F::one();
        let eps = F::from_f64(ADAM_EPS);
        let c1 = F::from_f64(1.0 - ADAM_BETA1.powi(self.step as i32));
        let c2 = F::from_f64(1.0 - ADAM_BETA2.powi(self.step as i32));
        let lr = F::from_f64(lr);
        for (((p, g), m), v) in params
            .data_mut()
            .iter_mut()
            .zip(grads.data().iter())
            .zip(self.m.data_mut().iter_mut())
            .zip(self.v.data_mut().iter_mut())
        {
            *m = b1 * *m + (one - b1) * *g;
            *v = b2 * *v + (one - b2) * *g * *g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// `shadow = decay·shadow + (1 − decay)·params`. With decay 0 the shadow
/// tracks the raw parameters exactly.
pub fn ema_update<F: Real>(shadow: &mut ParamVec<F>, params: &ParamVec<F>, decay: f64) {
    let d = F::from_f64(decay);
    let one_minus = F::one() - d;
    for (s, p) in shadow.data_mut().iter_mut().zip(params.data().iter()) {
        *s = d * *s + one_minus * *p;
    }
}

/// Scalar losses of one optimizer step, averaged over the batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub mse: f64,
    pub bce: f64,
    pub dice: f64,
    pub boundary: f64,
    pub total: f64,
}

fn check_finite(parts: &StepLosses, step: usize) -> Result<(), TrainError> {
    for (term, v) in [
        ("mse", parts.mse),
        ("bce", parts.bce),
        ("dice", parts.dice),
        ("boundary", parts.boundary),
        ("total", parts.total),
    ] {
        if !v.is_finite() {
            return Err(TrainError::NonFiniteLoss { term, step });
        }
    }
    Ok(())
}

/// One gradient step over a batch. Draws `t` uniformly from `1..=T` and fresh
/// noise per item from `rng`; deterministic given the RNG state.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    batch: &[&TrainItem<f32>],
    params: &mut ParamVec<f32>,
    opt: &mut AdamState<f32>,
    schedule: &NoiseSchedule,
    config: &DenoiserConfig,
    train: &TrainConfig,
    rng: &mut ChaCha12Rng,
    step: usize,
) -> Result<StepLosses, TrainError> {
    assert!(!batch.is_empty(), "empty batch");
    let mut grad_acc = ParamVec::<f32>::zeros(params.layout_arc());
    let mut losses = StepLosses {
        mse: 0.0,
        bce: 0.0,
        dice: 0.0,
        boundary: 0.0,
        total: 0.0,
    };
    let smooth = train.dice_smooth as f32;
    let inv_b = 1.0 / batch.len() as f32;
    for item in batch {
        let t = rng.gen_range(1..=schedule.len());
        let size = config.image_size;
        let eps = Array2::from_shape_fn((size, size), |_| f32::standard_normal(rng));
        let (parts, grads) = diffusion_item_gradient(
            item,
            t,
            &eps,
            params,
            config,
            schedule,
            &train.loss_weights,
            smooth,
        )?;
        grad_acc.scaled_add(inv_b, &grads);
        losses.mse += parts.mse as f64;
        losses.bce += parts.composite.bce as f64;
        losses.dice += parts.composite.dice as f64;
        losses.boundary += parts.composite.boundary as f64;
        losses.total += parts.total as f64;
    }
    let b = batch.len() as f64;
    losses.mse /= b;
    losses.bce /= b;
    losses.dice /= b;
    losses.boundary /= b;
    losses.total /= b;
    check_finite(&losses, step)?;

    opt.update(params, &grad_acc, train.learning_rate);
    Ok(losses)
}

/// One row of the training log CSV.
#[derive(Debug, Clone, Copy)]
pub struct LogRow {
    pub step: usize,
    pub losses: StepLosses,
    pub wall_seconds: f64,
}

/// Training log CSV, header `step,mse,bce,dice,boundary,total,wall_seconds`.
pub fn training_log_csv(rows: &[LogRow]) -> String {
    let mut out = String::from("step,mse,bce,dice,boundary,total,wall_seconds\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.3}\n",
            r.step,
            r.losses.mse,
            r.losses.bce,
            r.losses.dice,
            r.losses.boundary,
            r.losses.total,
            r.wall_seconds
        ));
    }
    out
}

/// Result of a full training run, ready to persist.
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
}

/// Run the full training loop on a dataset. Reproducible: identical config
/// and data give an identical checkpoint.
pub fn train(
    dataset: &[Sample],
    config: &DenoiserConfig,
    tc: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    tc.validate()?;
    config.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::InvalidConfig("empty dataset".into()));
    }
    for s in dataset {
        if s.size() != config.image_size || s.channels() + 1 != config.in_channels {
            return Err(TrainError::InvalidConfig(format!(
                "sample '{}' is {}x{} with {} channels; config wants image_size {} and {} condition channels",
                s.id,
                s.size(),
                s.size(),
                s.channels(),
                config.image_size,
                config.in_channels - 1
            )));
        }
    }

    let schedule = tc.schedule();
    let items: Vec<TrainItem<f32>> = dataset.iter().map(TrainItem::from_sample).collect();

    let mut init_rng = ChaCha12Rng::seed_from_u64(tc.seed);
    let mut params: ParamVec<f32> = init_params(config, &mut init_rng)?;
    let mut opt = AdamState::new(params.layout_arc());
    let mut ema = params.clone();
    let mut rng = ChaCha12Rng::seed_from_u64(tc.seed ^ 0x9E37_79B9_7F4A_7C15);

    let started = Instant::now();
    let mut log = Vec::new();
    for step in 1..=tc.steps {
        let batch: Vec<&TrainItem<f32>> = (0..tc.batch_size)
            .map(|_| &items[rng.gen_range(0..items.len())])
            .collect();
        let losses = train_step(
            &batch,
            &mut params,
            &mut opt,
            &schedule,
            config,
            tc,
            &mut rng,
            step,
        )?;
        ema_update(&mut ema, &params, tc.ema_decay);
        if step % tc.log_every == 0 || step == tc.steps {
            log.push(LogRow {
                step,
                losses,
                wall_seconds: started.elapsed().as_secs_f64(),
            });
        }
    }

    let mut hasher = Sha256::new();
    hasher.update(rng.get_seed());
    hasher.update(rng.get_word_pos().to_le_bytes());
    let rng_digest: [u8; 32] = hasher.finalize().into();

    let checkpoint = Checkpoint {
        version: CHECKPOINT_VERSION,
        config: *config,
        schedule_timesteps: tc.timesteps,
        schedule_beta_start: tc.beta_start,
        schedule_beta_end: tc.beta_end,
        step: tc.steps as u64,
        rng_digest,
        params,
        opt: Some(opt),
        ema: Some(ema),
    };
    Ok(TrainOutcome { checkpoint, log })
}
