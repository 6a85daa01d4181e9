//! Null-text inversion: per-step optimisation of the unconditional
//! embedding so that guided sampling tracks the `w = 1` pivot trajectory.

use log::debug;
use serde::{Deserialize, Serialize};

use super::{check_grid, cond_image_for, ddim_invert, guided_eps, InversionMethod, InversionTrace, StageCondition, StepLoss};
use crate::denoiser::{DenoiserInput, DenoiserModel};
use crate::error::{Error, Result};
use crate::schedule::{ddim_coefficients, ddim_step_backward, NoiseSchedule, TimestepGrid};
use crate::tensor::StateTensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NtiConfig {
    pub inner_steps: usize,
    /// Adam step size.
    pub learning_rate: f64,
    /// Stop once the per-element mean squared error falls below this.
    pub early_stop_tol: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for NtiConfig {
    fn default() -> Self {
        Self {
            inner_steps: 10,
            learning_rate: 0.01,
            early_stop_tol: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl NtiConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if self.inner_steps == 0
            || !(self.learning_rate >= 0.0 && self.learning_rate.is_finite())
            || !(self.early_stop_tol >= 0.0)
            || !unit(self.beta1)
            || !unit(self.beta2)
            || !(self.adam_eps > 0.0 && self.adam_eps.is_finite())
        {
            return Err(Error::InvalidRange(format!("null-text config {self:?}")));
        }
        Ok(())
    }
}

/// Minimises `mean |base + s * eps(z, null) - target|^2` over `null` with a
/// fresh Adam state. Returns the best iterate, so the loss never ends above
/// its start.
#[allow(clippy::too_many_arguments)]
fn optimise_null(
    model: &DenoiserModel,
    z: &StateTensor,
    timestep: usize,
    cond_image: Option<&StateTensor>,
    base: &StateTensor,
    s: f64,
    target: &StateTensor,
    null: Vec<f64>,
    cfg: &NtiConfig,
) -> Result<(Vec<f64>, StepLoss)> {
    let n = target.len() as f64;
    let eval = |null: &[f64]| -> Result<_> {
        let ev = model.evaluate(&DenoiserInput::new(z, timestep, null).with_cond_image(cond_image))?;
        let r = base.lincomb(1.0, ev.output(), s)?.sub(target)?;
        let loss = r.sum_sq() / n;
        Ok((ev, r, loss))
    };
    let (mut ev, mut r, mut loss) = eval(&null)?;
    let start = (loss * n).sqrt();
    let (mut best, mut best_loss) = (null.clone(), loss);
    let mut cur = null;
    let mut m = vec![0.0; cur.len()];
    let mut v = vec![0.0; cur.len()];
    let mut iterations = 0;
    while iterations < cfg.inner_steps && loss >= cfg.early_stop_tol {
        let (_, g) = ev.vjp(&r)?;
        iterations += 1;
        let k = iterations as i32;
        let (c1, c2) = (1.0 - cfg.beta1.powi(k), 1.0 - cfg.beta2.powi(k));
        for i in 0..cur.len() {
            let gi = 2.0 * s / n * g[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            cur[i] -= cfg.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.adam_eps);
        }
        (ev, r, loss) = eval(&cur)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("null-text loss at timestep {timestep}")));
        }
        if loss < best_loss {
            (best, best_loss) = (cur.clone(), loss);
        }
    }
    Ok((
        best,
        StepLoss {
            start,
            end: (best_loss * n).sqrt(),
            iterations,
            history: Vec::new(),
        },
    ))
}

/// Pivot inversion at `w = 1`, then per-step null-embedding optimisation
/// under `cond.guidance`. With `w = 1` nothing is optimised and the result
/// replays exactly like [`ddim_invert`].
pub fn null_text_invert(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    grid: &TimestepGrid,
    x0: &StateTensor,
    cond: &StageCondition,
    config: &NtiConfig,
) -> Result<InversionTrace> {
    config.validate()?;
    check_grid(schedule, grid)?;
    let pivot_cond = StageCondition {
        guidance: 1.0,
        ..cond.clone()
    };
    let mut trace = ddim_invert(model, schedule, grid, x0, &pivot_cond)?;
    trace.method = InversionMethod::Nti;
    trace.guidance = cond.guidance;
    let w = cond.guidance;
    if w == 1.0 {
        return Ok(trace);
    }
    trace.inner_steps = config.inner_steps;
    let ci = cond_image_for(cond, x0)?;
    let t_len = grid.len();
    let mut null = vec![0.0; model.cond_width()];
    let mut losses = Vec::with_capacity(t_len);
    let mut z = trace.states[t_len].clone();
    for k in (1..=t_len).rev() {
        let t = grid.model_timestep(k);
        let (a, c) = ddim_coefficients(schedule, grid.level(k), grid.level(k - 1))?;
        let ec = model.predict_eps(&DenoiserInput::new(&z, t, &cond.prompt.vector).with_cond_image(ci.as_ref()))?;
        let base = z.lincomb(a, &ec, c * w)?;
        let (opt, sl) = optimise_null(
            model,
            &z,
            t,
            ci.as_ref(),
            &base,
            c * (1.0 - w),
            &trace.states[k - 1],
            null,
            config,
        )?;
        debug!("null-text step {k}: |r| {:.3e} -> {:.3e}", sl.start, sl.end);
        // same arithmetic as replay, so the trace reproduces this path exactly
        let eps = guided_eps(model, &z, t, &cond.prompt.vector, &opt, ci.as_ref(), w)?;
        z = ddim_step_backward(schedule, &z, grid.level(k), grid.level(k - 1), &eps)?;
        z.ensure_finite(&format!("null-text state {}", k - 1))?;
        trace.null_embeddings[k - 1] = opt.clone();
        null = opt;
        losses.push(sl);
    }
    trace.step_losses = losses;
    Ok(trace)
}
