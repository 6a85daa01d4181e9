//! Noise schedules, forward noising and the deterministic DDIM update.
//!
//! Every function here is pure. Timesteps are indices into the training
//! schedule; [`Timestep::Clean`] stands for the noise-free end of a
//! trajectory, where the cumulative signal rate is exactly one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::StateTensor;

/// Smallest cumulative signal rate we are willing to divide by.
pub const ALPHA_BAR_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear betas from `beta_start` to `beta_end` inclusive.
    pub fn linear(num_train_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if num_train_steps == 0 {
            return Err(Error::InvalidRange("num_train_steps must be at least 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidRange(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let betas: Vec<f64> = if num_train_steps == 1 {
            vec![beta_start]
        } else {
            let span = beta_end - beta_start;
            let last = (num_train_steps - 1) as f64;
            (0..num_train_steps)
                .map(|i| beta_start + span * i as f64 / last)
                .collect()
        };
        let alpha_bars: Vec<f64> = betas
            .iter()
            .scan(1.0, |acc, b| {
                *acc *= 1.0 - b;
                Some(*acc)
            })
            .collect();
        // noise-to-signal ratios divide by sqrt(abar)
        if alpha_bars.last().is_some_and(|a| *a < f64::MIN_POSITIVE) {
            return Err(Error::InvalidRange(format!(
                "alpha_bar underflows over {num_train_steps} steps with betas {beta_start}..{beta_end}"
            )));
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn num_train_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, t: Timestep) -> Result<f64> {
        match t {
            Timestep::Clean => Ok(1.0),
            Timestep::At(i) => self.alpha_bars.get(i).copied().ok_or_else(|| {
                Error::InvalidRange(format!(
                    "timestep {i} outside schedule of {} steps",
                    self.alpha_bars.len()
                ))
            }),
        }
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("default schedule is valid")
    }
}

/// A noise level on the training schedule, or the clean endpoint.
///
/// `Clean` orders before every `At(_)`, so "noisier" is "greater".
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Timestep {
    Clean,
    At(usize),
}

/// The `T` schedule indices visited by inference, strictly increasing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimestepGrid {
    timesteps: Vec<usize>,
}

impl TimestepGrid {
    /// `T` evenly spaced indices with stride `num_train_steps / T`, ending at
    /// the last multiple of the stride.
    pub fn evenly_spaced(num_train_steps: usize, inference_steps: usize) -> Result<Self> {
        if inference_steps == 0 || inference_steps > num_train_steps {
            return Err(Error::InvalidRange(format!(
                "inference steps must be in 1..={num_train_steps}, got {inference_steps}"
            )));
        }
        let stride = num_train_steps / inference_steps;
        Ok(Self {
            timesteps: (1..=inference_steps).map(|i| i * stride - 1).collect(),
        })
    }

    pub fn from_timesteps(timesteps: Vec<usize>, num_train_steps: usize) -> Result<Self> {
        if timesteps.is_empty() {
            return Err(Error::InvalidRange("empty timestep grid".into()));
        }
        if timesteps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Ordering("grid timesteps must be strictly increasing".into()));
        }
        if *timesteps.last().unwrap() >= num_train_steps {
            return Err(Error::InvalidRange("grid timestep beyond schedule".into()));
        }
        Ok(Self { timesteps })
    }

    /// `T`
    pub fn len(&self) -> usize {
        self.timesteps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timesteps.is_empty()
    }

    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    /// Noise level of trajectory state `k` (`0..=T`); state 0 is clean.
    pub fn level(&self, k: usize) -> Timestep {
        if k == 0 {
            Timestep::Clean
        } else {
            Timestep::At(self.timesteps[k - 1])
        }
    }

    /// Timestep fed to the denoiser when stepping away from state `k`.
    ///
    /// The clean state has no meaningful noise level, so it borrows the first
    /// grid timestep; every other state uses its own.
    pub fn model_timestep(&self, k: usize) -> usize {
        self.timesteps[k.saturating_sub(1)]
    }
}

/// `sqrt(abar_t) * x0 + sqrt(1 - abar_t) * noise`
pub fn q_sample(
    schedule: &NoiseSchedule,
    x0: &StateTensor,
    t: Timestep,
    noise: &StateTensor,
) -> Result<StateTensor> {
    let ab = schedule.alpha_bar(t)?;
    x0.lincomb(ab.sqrt(), noise, (1.0 - ab).sqrt())
}

/// Denoised estimate `(z_t - sqrt(1 - abar_t) * eps) / sqrt(abar_t)`.
pub fn predict_x0(
    schedule: &NoiseSchedule,
    z_t: &StateTensor,
    t: Timestep,
    eps_hat: &StateTensor,
) -> Result<StateTensor> {
    let ab = schedule.alpha_bar(t)?;
    if ab < ALPHA_BAR_FLOOR {
        return Err(Error::Degenerate {
            timestep: match t {
                Timestep::At(i) => i,
                Timestep::Clean => 0,
            },
            alpha_bar: ab,
        });
    }
    let inv = 1.0 / ab.sqrt();
    z_t.lincomb(inv, eps_hat, -(1.0 - ab).sqrt() * inv)
}

/// Coefficients `(a, c)` such that a DDIM move from `from` to `to` is
/// `a * z + c * eps`.
pub fn ddim_coefficients(schedule: &NoiseSchedule, from: Timestep, to: Timestep) -> Result<(f64, f64)> {
    let ab_from = schedule.alpha_bar(from)?;
    let ab_to = schedule.alpha_bar(to)?;
    if ab_from < ALPHA_BAR_FLOOR {
        return Err(Error::Degenerate {
            timestep: match from {
                Timestep::At(i) => i,
                Timestep::Clean => 0,
            },
            alpha_bar: ab_from,
        });
    }
    let ratio = (ab_to / ab_from).sqrt();
    Ok((ratio, (1.0 - ab_to).sqrt() - ratio * (1.0 - ab_from).sqrt()))
}

fn ddim_move(
    schedule: &NoiseSchedule,
    z_t: &StateTensor,
    from: Timestep,
    to: Timestep,
    eps_hat: &StateTensor,
) -> Result<StateTensor> {
    let x0 = predict_x0(schedule, z_t, from, eps_hat)?;
    let ab_to = schedule.alpha_bar(to)?;
    x0.lincomb(ab_to.sqrt(), eps_hat, (1.0 - ab_to).sqrt())
}

/// One deterministic DDIM step towards more noise (the inversion direction).
pub fn ddim_step_forward(
    schedule: &NoiseSchedule,
    z_t: &StateTensor,
    t: Timestep,
    t_next: Timestep,
    eps_hat: &StateTensor,
) -> Result<StateTensor> {
    if t_next <= t {
        return Err(Error::Ordering(format!(
            "forward step needs t_next > t, got {t:?} -> {t_next:?}"
        )));
    }
    ddim_move(schedule, z_t, t, t_next, eps_hat)
}

/// One deterministic DDIM step towards less noise (sampling / replay).
pub fn ddim_step_backward(
    schedule: &NoiseSchedule,
    z_t: &StateTensor,
    t: Timestep,
    t_prev: Timestep,
    eps_hat: &StateTensor,
) -> Result<StateTensor> {
    if t_prev >= t {
        return Err(Error::Ordering(format!(
            "backward step needs t_prev < t, got {t:?} -> {t_prev:?}"
        )));
    }
    ddim_move(schedule, z_t, t, t_prev, eps_hat)
}

/// Classifier-free guidance `w * eps_cond + (1 - w) * eps_uncond`.
pub fn cfg_combine(eps_cond: &StateTensor, eps_uncond: &StateTensor, w: f64) -> Result<StateTensor> {
    eps_cond.lincomb(w, eps_uncond, 1.0 - w)
}
