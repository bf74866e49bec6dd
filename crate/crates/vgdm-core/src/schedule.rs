//! Diffusion variance schedules and the closed-form Gaussian quantities of the
//! forward and reverse chains.
//!
//! All schedule constants are computed and stored in `f64` regardless of the
//! model precision, so the cumulative product stays accurate out to large `T`.
//! Timesteps are 1-indexed: `t` ranges over `1..=T`, and the cumulative
//! product at `t = 0` is defined as 1.

use ndarray::{Array, Dimension};
use thiserror::Error;

use crate::real::Real;

#[derive(Debug, Error, PartialEq)]
pub enum ScheduleError {
    #[error("timestep count must be >= 1, got {0}")]
    InvalidTimestepCount(usize),
    #[error("beta bounds must lie strictly inside (0, 1), got [{0}, {1}]")]
    BetaOutOfBounds(f64, f64),
    #[error("beta_start {0} exceeds beta_end {1}")]
    BetaOrderReversed(f64, f64),
    #[error("timestep {t} out of range 1..={t_max}")]
    TimestepOutOfRange { t: usize, t_max: usize },
    #[error("array shape mismatch: {0} vs {1}")]
    ShapeMismatch(String, String),
}

/// Precomputed per-timestep diffusion constants.
///
/// Immutable after construction; reads are safe from any number of threads.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_variances: Vec<f64>,
}

impl NoiseSchedule {
    /// Number of timesteps `T`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    fn check_t(&self, t: usize) -> Result<(), ScheduleError> {
        if t < 1 || t > self.len() {
            return Err(ScheduleError::TimestepOutOfRange {
                t,
                t_max: self.len(),
            });
        }
        Ok(())
    }

    /// β_t for `t` in `1..=T`. Panics if `t` is out of range.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// α_t = 1 − β_t.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// ᾱ_t, the cumulative product of α over `1..=t`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    /// ᾱ_{t−1}, with ᾱ_0 defined as 1.
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t <= 1 {
            1.0
        } else {
            self.alpha_bars[t - 2]
        }
    }

    /// Posterior variance β̃_t = β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t); β̃_1 = 0.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.posterior_variances[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

/// Build a schedule with β interpolated linearly from `beta_start` at `t = 1`
/// to `beta_end` at `t = T`.
pub fn make_linear_schedule(
    t_max: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<NoiseSchedule, ScheduleError> {
    if t_max < 1 {
        return Err(ScheduleError::InvalidTimestepCount(t_max));
    }
    if !(beta_start > 0.0 && beta_start < 1.0 && beta_end > 0.0 && beta_end < 1.0) {
        return Err(ScheduleError::BetaOutOfBounds(beta_start, beta_end));
    }
    if beta_start > beta_end {
        return Err(ScheduleError::BetaOrderReversed(beta_start, beta_end));
    }

    let betas: Vec<f64> = if t_max == 1 {
        vec![beta_start]
    } else {
        (0..t_max)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64)
            .collect()
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(t_max);
    let mut prod = 1.0;
    for a in &alphas {
        prod *= a;
        alpha_bars.push(prod);
    }
    let posterior_variances: Vec<f64> = (0..t_max)
        .map(|i| {
            if i == 0 {
                0.0
            } else {
                betas[i] * (1.0 - alpha_bars[i - 1]) / (1.0 - alpha_bars[i])
            }
        })
        .collect();

    Ok(NoiseSchedule {
        betas,
        alphas,
        alpha_bars,
        posterior_variances,
    })
}

fn check_shapes<F: Real, D: Dimension>(
    a: &Array<F, D>,
    b: &Array<F, D>,
) -> Result<(), ScheduleError> {
    if a.raw_dim() != b.raw_dim() {
        return Err(ScheduleError::ShapeMismatch(
            format!("{:?}", a.shape()),
            format!("{:?}", b.shape()),
        ));
    }
    Ok(())
}

/// Closed-form marginal of the forward chain:
/// `x_t = √ᾱ_t · x0 + √(1 − ᾱ_t) · eps`.
pub fn q_sample<F: Real, D: Dimension>(
    x0: &Array<F, D>,
    t: usize,
    eps: &Array<F, D>,
    schedule: &NoiseSchedule,
) -> Result<Array<F, D>, ScheduleError> {
    schedule.check_t(t)?;
    check_shapes(x0, eps)?;
    let a = F::from_f64(schedule.alpha_bar(t).sqrt());
    let b = F::from_f64((1.0 - schedule.alpha_bar(t)).sqrt());
    Ok(x0.mapv(|v| v * a) + &eps.mapv(|v| v * b))
}

/// One step of the forward kernel: `√(1 − β_t) · x_prev + √β_t · eps`.
pub fn forward_step<F: Real, D: Dimension>(
    x_prev: &Array<F, D>,
    t: usize,
    eps: &Array<F, D>,
    schedule: &NoiseSchedule,
) -> Result<Array<F, D>, ScheduleError> {
    schedule.check_t(t)?;
    check_shapes(x_prev, eps)?;
    let a = F::from_f64((1.0 - schedule.beta(t)).sqrt());
    let b = F::from_f64(schedule.beta(t).sqrt());
    Ok(x_prev.mapv(|v| v * a) + &eps.mapv(|v| v * b))
}

/// Reverse-step mean from predicted noise:
/// `μ = (x_t − β_t/√(1 − ᾱ_t) · ε̂) / √α_t`.
pub fn posterior_mean_from_eps<F: Real, D: Dimension>(
    x_t: &Array<F, D>,
    t: usize,
    eps_hat: &Array<F, D>,
    schedule: &NoiseSchedule,
) -> Result<Array<F, D>, ScheduleError> {
    schedule.check_t(t)?;
    check_shapes(x_t, eps_hat)?;
    let recip_sqrt_alpha = F::from_f64(1.0 / schedule.alpha(t).sqrt());
    let eps_coeff = F::from_f64(schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt());
    Ok((x_t - &eps_hat.mapv(|v| v * eps_coeff)).mapv(|v| v * recip_sqrt_alpha))
}
