//! Reverse-process ancestral sampling: from seeded noise to a segmentation
//! probability map and binary mask, guided by a noise predictor.
//!
//! The reverse-step variance is fixed to the posterior variance β̃_t; the mean
//! uses the ε-parameterization. The diffusion state lives in [−1, 1]-scaled
//! mask space, so the final state is squashed with `logistic(x/2)`.

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::denoiser::{denoiser_forward, DenoiserConfig, DenoiserError};
use crate::params::ParamVec;
use crate::real::Real;
use crate::schedule::{posterior_mean_from_eps, NoiseSchedule, ScheduleError};

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
}

/// Per-pixel probability map plus its thresholded binary mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPrediction<F> {
    pub prob: Array2<F>,
    pub mask: Array2<u8>,
    pub threshold: f64,
}

impl<F: Real> MaskPrediction<F> {
    /// Threshold a probability map: `mask = (prob >= threshold)`.
    pub fn from_prob(prob: Array2<F>, threshold: f64) -> Self {
        let mask = prob.mapv(|p| (p.as_f64() >= threshold) as u8);
        Self {
            prob,
            mask,
            threshold,
        }
    }
}

/// One ancestral step: `posterior_mean_from_eps + √β̃_t · noise`.
///
/// At `t = 1` the posterior variance is zero and any supplied noise is
/// ignored; the output is the mean exactly.
pub fn ddpm_sample_step<F: Real>(
    x_t: &Array2<F>,
    t: usize,
    eps_hat: &Array2<F>,
    schedule: &NoiseSchedule,
    noise: Option<&Array2<F>>,
) -> Result<Array2<F>, SamplerError> {
    let mut x = posterior_mean_from_eps(x_t, t, eps_hat, schedule)?;
    if t > 1 {
        if let Some(z) = noise {
            if z.raw_dim() != x.raw_dim() {
                return Err(ScheduleError::ShapeMismatch(
                    format!("{:?}", x.shape()),
                    format!("{:?}", z.shape()),
                )
                .into());
            }
            let sigma = F::from_f64(schedule.posterior_variance(t).sqrt());
            x.zip_mut_with(z, |a, b| *a = *a + sigma * *b);
        }
    }
    Ok(x)
}

/// Run the full reverse chain from an explicit initial state with an
/// arbitrary noise predictor. `noise_rng` draws the per-step injected noise;
/// pass `None` for the deterministic mean path. This is the injection point
/// for oracle predictors in tests.
pub fn sample_field<F, P>(
    x_init: Array2<F>,
    schedule: &NoiseSchedule,
    mut predictor: P,
    mut noise_rng: Option<&mut ChaCha12Rng>,
) -> Result<Array2<F>, SamplerError>
where
    F: Real,
    P: FnMut(&Array2<F>, usize) -> Result<Array2<F>, SamplerError>,
{
    let mut x = x_init;
    for t in (1..=schedule.len()).rev() {
        let eps_hat = predictor(&x, t)?;
        let noise = if t > 1 {
            noise_rng
                .as_deref_mut()
                .map(|rng| Array2::from_shape_fn(x.raw_dim(), |_| F::standard_normal(rng)))
        } else {
            None
        };
        x = ddpm_sample_step(&x, t, &eps_hat, schedule, noise.as_ref())?;
    }
    Ok(x)
}

/// Deterministic per-item stream derivation for a base seed.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    base.wrapping_add((stream.wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Sample a segmentation mask for one conditioning image.
///
/// Starts from seeded standard-normal noise, runs the reverse chain with the
/// denoiser, maps the final mask-channel state through `logistic(x/2)` and
/// thresholds. Deterministic given `(inputs, seed)`.
pub fn sample_mask<F: Real>(
    condition: &Array3<F>,
    params: &ParamVec<F>,
    config: &DenoiserConfig,
    schedule: &NoiseSchedule,
    seed: u64,
    threshold: f64,
) -> Result<MaskPrediction<F>, SamplerError> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let size = config.image_size;
    let x_init = Array2::from_shape_fn((size, size), |_| F::standard_normal(&mut rng));
    let x = sample_field(
        x_init,
        schedule,
        |x_t, t| {
            denoiser_forward(x_t, condition, t, params, config)
                .map(|(eps, _)| eps)
                .map_err(SamplerError::from)
        },
        Some(&mut rng),
    )?;
    let half = F::from_f64(0.5);
    let prob = x.mapv(|v| F::one() / (F::one() + (-(v * half)).exp()));
    Ok(MaskPrediction::from_prob(prob, threshold))
}
