//! Per-timestep iterative inversion for super-resolution stages.
//!
//! At step `k` the known state `I_{k-1}` is fixed and the candidate `x` for
//! `I_k` is moved by gradient descent until one backward DDIM step from `x`
//! lands on `I_{k-1}`:
//!
//! ```text
//! r(x) = a x + c eps(x) - I_{k-1}      L = |r|^2      dL/dx = 2 (a r + c J^T r)
//! ```

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use super::{check_grid, cond_image_for, new_trace, GuidedEval, InversionMethod, InversionTrace, StageCondition, StepLoss};
use crate::denoiser::DenoiserModel;
use crate::error::{Error, Result};
use crate::schedule::{ddim_coefficients, ddim_step_forward, NoiseSchedule, TimestepGrid};
use crate::tensor::StateTensor;

/// Starting point of each inner loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IterInvInit {
    /// `x = I_{k-1}`.
    #[default]
    PreviousState,
    /// One forward DDIM step from `I_{k-1}`.
    DdimForward,
}

/// What gets stored as `I_k` once the inner loop ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IterInvUpdate {
    /// The optimised candidate itself.
    #[default]
    OptimizedState,
    /// The candidate's one-step backward image `a x + c eps(x)`.
    MappedState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IterInvConfig {
    /// Inference steps `T`.
    pub steps: usize,
    /// Inner iterations `N` per step.
    pub inner_steps: usize,
    pub step_size: f64,
    /// Backtrack by halving whenever a step would raise the loss.
    pub step_halving: bool,
    pub max_halvings: usize,
    /// Multiplier applied to the step after every accepted move (halving
    /// mode only). The step restarts from `step_size` at each timestep.
    pub step_growth: f64,
    /// Stop once the residual 2-norm falls below this.
    pub early_stop_tol: f64,
    pub sigma_aug: f64,
    /// Seed of the conditioning noise realisation.
    pub noise_seed: u64,
    /// Guidance scales `[w1, w2, w3]`.
    pub guidance: [f64; 3],
    pub init: IterInvInit,
    pub update: IterInvUpdate,
    /// Keep every inner-iteration loss in the trace.
    pub record_history: bool,
}

impl Default for IterInvConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            inner_steps: 20,
            step_size: 0.1,
            step_halving: true,
            max_halvings: 30,
            step_growth: 2.0,
            early_stop_tol: 1e-6,
            sigma_aug: 0.05,
            noise_seed: 0,
            guidance: [7.0, 1.0, 1.0],
            init: IterInvInit::default(),
            update: IterInvUpdate::default(),
            record_history: false,
        }
    }
}

impl IterInvConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidRange(m));
        if self.steps == 0 || self.inner_steps == 0 {
            return bad(format!("steps {} and inner_steps {} must be >= 1", self.steps, self.inner_steps));
        }
        // zero is accepted: it turns the inner loop into a no-op
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return bad(format!("step_size {}", self.step_size));
        }
        if !(self.step_growth >= 1.0 && self.step_growth.is_finite()) {
            return bad(format!("step_growth {} must be >= 1", self.step_growth));
        }
        if !(self.early_stop_tol >= 0.0) {
            return bad(format!("early_stop_tol {}", self.early_stop_tol));
        }
        if !(self.sigma_aug >= 0.0 && self.sigma_aug.is_finite()) {
            return bad(format!("sigma_aug {}", self.sigma_aug));
        }
        if self.guidance.iter().any(|w| !w.is_finite()) {
            return bad(format!("guidance {:?}", self.guidance));
        }
        Ok(())
    }
}

struct Step<'a> {
    model: &'a DenoiserModel,
    cond: &'a [f64],
    null: &'a [f64],
    cond_image: Option<&'a StateTensor>,
    w: f64,
    timestep: usize,
    a: f64,
    c: f64,
    target: &'a StateTensor,
}

impl<'a> Step<'a> {
    fn eval(&self, x: &StateTensor) -> Result<(GuidedEval<'a>, StateTensor, f64)> {
        let ev = GuidedEval::new(self.model, x, self.timestep, self.cond, self.null, self.cond_image, self.w)?;
        let r = x.lincomb(self.a, &ev.eps, self.c)?.sub(self.target)?;
        let loss = r.sum_sq();
        Ok((ev, r, loss))
    }
}

fn optimise(step: &Step<'_>, init: StateTensor, cfg: &IterInvConfig) -> Result<(StateTensor, StepLoss)> {
    let (mut ev, mut r, mut loss) = step.eval(&init)?;
    let start = loss.sqrt();
    let mut history = Vec::new();
    let mut lr = cfg.step_size;
    let mut iterations = 0;
    let tol_sq = cfg.early_stop_tol * cfg.early_stop_tol;
    while iterations < cfg.inner_steps && loss >= tol_sq {
        let jt = ev.state_vjp(&r)?;
        let grad = r.lincomb(2.0 * step.a, &jt, 2.0 * step.c)?;
        let x = ev.state();
        let tries = if cfg.step_halving { cfg.max_halvings + 1 } else { 1 };
        let mut accepted = None;
        for _ in 0..tries {
            let trial = x.lincomb(1.0, &grad, -lr)?;
            if trial.is_finite() {
                let (tev, tr, tl) = step.eval(&trial)?;
                if !cfg.step_halving || tl <= loss {
                    accepted = Some((tev, tr, tl));
                    break;
                }
            } else if !cfg.step_halving {
                return Err(Error::Divergence {
                    step: iterations,
                    loss: f64::INFINITY,
                });
            }
            lr *= 0.5;
        }
        iterations += 1;
        let Some((tev, tr, tl)) = accepted else {
            // no descent along the gradient at machine precision
            break;
        };
        if !tl.is_finite() {
            return Err(Error::NonFinite(format!("inner loss at timestep {}", step.timestep)));
        }
        (ev, r, loss) = (tev, tr, tl);
        if cfg.step_halving {
            lr *= cfg.step_growth;
        }
        if cfg.record_history {
            history.push(loss.sqrt());
        }
    }
    let end = loss.sqrt();
    if end > start {
        warn!("inner loop at timestep {} ended above its start: {start:e} -> {end:e}", step.timestep);
    }
    let next = match cfg.update {
        IterInvUpdate::OptimizedState => ev.state().clone(),
        IterInvUpdate::MappedState => ev.state().lincomb(step.a, &ev.eps, step.c)?,
    };
    Ok((
        next,
        StepLoss {
            start,
            end,
            iterations,
            history,
        },
    ))
}

/// Inverts one super-resolution stage. `cond.sr` carries the previous
/// stage's reconstruction and the noise realisation added to it.
pub fn iterinv_stage(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    grid: &TimestepGrid,
    x_stage: &StateTensor,
    cond: &StageCondition,
    config: &IterInvConfig,
) -> Result<InversionTrace> {
    cond.validate(model)?;
    config.validate()?;
    check_grid(schedule, grid)?;
    x_stage.ensure_finite("input image")?;
    if cond.sr.is_none() {
        return Err(Error::Invariant("iterative inversion needs a conditioning image".into()));
    }
    let ci = cond_image_for(cond, x_stage)?;
    let null = vec![0.0; model.cond_width()];
    let mut states = vec![x_stage.clone()];
    let mut losses = Vec::with_capacity(grid.len());
    for k in 1..=grid.len() {
        let prev = &states[k - 1];
        let (a, c) = ddim_coefficients(schedule, grid.level(k), grid.level(k - 1))?;
        let step = Step {
            model,
            cond: &cond.prompt.vector,
            null: &null,
            cond_image: ci.as_ref(),
            w: cond.guidance,
            timestep: grid.model_timestep(k),
            a,
            c,
            target: prev,
        };
        let init = match config.init {
            IterInvInit::PreviousState => prev.clone(),
            IterInvInit::DdimForward => {
                let eps = super::guided_eps(
                    model,
                    prev,
                    grid.model_timestep(k - 1),
                    &cond.prompt.vector,
                    &null,
                    ci.as_ref(),
                    cond.guidance,
                )?;
                ddim_step_forward(schedule, prev, grid.level(k - 1), grid.level(k), &eps)?
            }
        };
        let (next, sl) = optimise(&step, init, config)?;
        debug!(
            "stage {} step {k}: |r| {:.3e} -> {:.3e} in {} iterations",
            cond.stage, sl.start, sl.end, sl.iterations
        );
        next.ensure_finite(&format!("inverted state {k}"))?;
        states.push(next);
        losses.push(sl);
    }
    let mut trace = new_trace(
        InversionMethod::IterInv,
        schedule,
        grid,
        cond,
        vec![null; grid.len()],
        states,
    );
    trace.inner_steps = config.inner_steps;
    trace.step_losses = losses;
    Ok(trace)
}
