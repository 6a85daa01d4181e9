//! DDIM inversion, null-text inversion and per-timestep iterative inversion.
//!
//! Every method produces an [`InversionTrace`]: the state sequence `0..=T`
//! plus whatever was optimised or drawn, so that [`replay_trajectory`] can
//! run the deterministic backward pass without the original image.
//!
//! State `k` of a trace sits at noise level `grid.level(k)` and is labelled
//! `grid.model_timestep(k)` when fed to the denoiser.

mod iterinv;
mod nti;
mod trace;

pub use iterinv::{iterinv_stage, IterInvConfig, IterInvInit, IterInvUpdate};
pub use nti::{null_text_invert, NtiConfig};
pub use trace::{decode_trace, encode_trace, load_trace, save_trace, TRACE_MAGIC};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiserInput, DenoiserModel, Evaluation};
use crate::embedding::PromptEmbedding;
use crate::error::{Error, Result};
use crate::schedule::{cfg_combine, ddim_step_backward, ddim_step_forward, NoiseSchedule, TimestepGrid};
use crate::tensor::StateTensor;
use crate::trainer::{check_stage, sr_conditioning};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InversionMethod {
    Ddim,
    Nti,
    IterInv,
    /// Not an inversion: the trace is a sampling trajectory from noise.
    Generated,
}

impl InversionMethod {
    pub(crate) fn code(self) -> u64 {
        self as u64
    }

    pub(crate) fn from_code(c: u64) -> Result<Self> {
        [Self::Ddim, Self::Nti, Self::IterInv, Self::Generated]
            .get(c as usize)
            .copied()
            .ok_or_else(|| Error::Format(format!("unknown inversion method code {c}")))
    }
}

/// Low-resolution conditioning of a super-resolution stage together with the
/// noise realisation added to it. The same realisation is used for inversion
/// and replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SrConditioning {
    /// Previous stage's reconstruction at its native resolution.
    pub base: StateTensor,
    pub sigma_aug: f64,
    pub seed: u64,
}

impl SrConditioning {
    pub fn new(base: StateTensor, sigma_aug: f64, seed: u64) -> Result<Self> {
        if !(sigma_aug >= 0.0 && sigma_aug.is_finite()) {
            return Err(Error::InvalidRange(format!("sigma_aug {sigma_aug}")));
        }
        base.ensure_finite("conditioning base image")?;
        Ok(Self { base, sigma_aug, seed })
    }

    pub fn noise(&self) -> StateTensor {
        let (h, w, c) = self.base.dims();
        StateTensor::randn(h, w, c, &mut ChaCha8Rng::seed_from_u64(self.seed))
    }

    /// The image handed to the denoiser, at `height x width`.
    pub fn image(&self, height: usize, width: usize) -> Result<StateTensor> {
        if height != width {
            return Err(Error::shape("square stage", format!("{height}x{width}")));
        }
        sr_conditioning(&self.base, height, self.sigma_aug, &self.noise())
    }
}

/// Prompt, guidance scale and (for stages 2 and 3) conditioning image.
#[derive(Debug, Clone, PartialEq)]
pub struct StageCondition {
    pub stage: usize,
    pub prompt: PromptEmbedding,
    pub guidance: f64,
    pub sr: Option<SrConditioning>,
}

impl StageCondition {
    pub fn base(prompt: PromptEmbedding, guidance: f64) -> Self {
        Self {
            stage: 1,
            prompt,
            guidance,
            sr: None,
        }
    }

    pub fn super_res(stage: usize, prompt: PromptEmbedding, guidance: f64, sr: SrConditioning) -> Self {
        Self {
            stage,
            prompt,
            guidance,
            sr: Some(sr),
        }
    }

    fn validate(&self, model: &DenoiserModel) -> Result<()> {
        check_stage(self.stage)?;
        if !self.guidance.is_finite() {
            return Err(Error::InvalidRange(format!("guidance {}", self.guidance)));
        }
        if (self.stage == 1) != self.sr.is_none() {
            return Err(Error::Invariant(format!(
                "stage {} {} a conditioning image",
                self.stage,
                if self.stage == 1 { "must not take" } else { "requires" }
            )));
        }
        crate::embedding::check_width(&self.prompt.vector, model.cond_width())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    /// Residual 2-norm before the inner loop.
    pub start: f64,
    /// Residual 2-norm after it.
    pub end: f64,
    pub iterations: usize,
    /// Residual 2-norm after every inner iteration, when requested.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionTrace {
    pub stage: usize,
    pub method: InversionMethod,
    pub num_train_steps: usize,
    pub grid: TimestepGrid,
    /// Inner iterations allowed per step (`0` when nothing is optimised).
    pub inner_steps: usize,
    pub guidance: f64,
    pub cond_embedding: Vec<f64>,
    /// Null embedding used at step `k` (moving state `k` to `k - 1`) is
    /// entry `k - 1`.
    pub null_embeddings: Vec<Vec<f64>>,
    pub conditioning: Option<SrConditioning>,
    /// `states[0]` is the input, `states[T]` the inverted noise.
    pub states: Vec<StateTensor>,
    /// One entry per optimised step, in inversion order; empty otherwise.
    pub step_losses: Vec<StepLoss>,
}

impl InversionTrace {
    pub fn steps(&self) -> usize {
        self.grid.len()
    }

    pub fn noise(&self) -> &StateTensor {
        self.states.last().expect("traces hold at least two states")
    }

    pub fn input(&self) -> &StateTensor {
        &self.states[0]
    }

    /// Structural checks, and the model compatibility checks replay needs.
    pub fn check(&self, model: Option<&DenoiserModel>) -> Result<()> {
        let mismatch = |m: String| Err(Error::TraceMismatch(m));
        let t = self.grid.len();
        if self.states.len() != t + 1 {
            return mismatch(format!("{} states for {t} steps", self.states.len()));
        }
        if self.null_embeddings.len() != t {
            return mismatch(format!("{} null embeddings for {t} steps", self.null_embeddings.len()));
        }
        if self.states.iter().any(|s| !s.same_shape(&self.states[0])) {
            return mismatch("states differ in shape".into());
        }
        if (self.stage == 1) != self.conditioning.is_none() {
            return mismatch(format!("stage {} conditioning presence", self.stage));
        }
        if self.grid.timesteps().last().is_some_and(|&l| l >= self.num_train_steps) {
            return mismatch("grid exceeds the training schedule".into());
        }
        if let Some(model) = model {
            let w = model.cond_width();
            if self.cond_embedding.len() != w || self.null_embeddings.iter().any(|n| n.len() != w) {
                return mismatch(format!("embedding width differs from the model's {w}"));
            }
        }
        Ok(())
    }
}

/// CFG-combined prediction; with `w == 1` only the conditional branch runs.
pub fn guided_eps(
    model: &DenoiserModel,
    state: &StateTensor,
    timestep: usize,
    cond: &[f64],
    null: &[f64],
    cond_image: Option<&StateTensor>,
    w: f64,
) -> Result<StateTensor> {
    let ec = model.predict_eps(&DenoiserInput::new(state, timestep, cond).with_cond_image(cond_image))?;
    if w == 1.0 {
        return Ok(ec);
    }
    let eu = model.predict_eps(&DenoiserInput::new(state, timestep, null).with_cond_image(cond_image))?;
    cfg_combine(&ec, &eu, w)
}

/// Guided prediction whose forward passes are kept for VJPs.
pub(crate) struct GuidedEval<'m> {
    cond: Evaluation<'m>,
    uncond: Option<Evaluation<'m>>,
    w: f64,
    pub eps: StateTensor,
}

impl<'m> GuidedEval<'m> {
    pub(crate) fn new(
        model: &'m DenoiserModel,
        state: &StateTensor,
        timestep: usize,
        cond: &[f64],
        null: &[f64],
        cond_image: Option<&StateTensor>,
        w: f64,
    ) -> Result<Self> {
        let ce = model.evaluate(&DenoiserInput::new(state, timestep, cond).with_cond_image(cond_image))?;
        if w == 1.0 {
            let eps = ce.output().clone();
            return Ok(Self {
                cond: ce,
                uncond: None,
                w,
                eps,
            });
        }
        let ue = model.evaluate(&DenoiserInput::new(state, timestep, null).with_cond_image(cond_image))?;
        let eps = cfg_combine(ce.output(), ue.output(), w)?;
        Ok(Self {
            cond: ce,
            uncond: Some(ue),
            w,
            eps,
        })
    }

    pub(crate) fn state(&self) -> &StateTensor {
        self.cond.state()
    }

    /// `J_state^T upstream` of the guided prediction.
    pub(crate) fn state_vjp(&self, upstream: &StateTensor) -> Result<StateTensor> {
        let (gc, _) = self.cond.vjp(upstream)?;
        match &self.uncond {
            None => Ok(gc),
            Some(u) => gc.lincomb(self.w, &u.vjp(upstream)?.0, 1.0 - self.w),
        }
    }
}

fn cond_image_for(cond: &StageCondition, x: &StateTensor) -> Result<Option<StateTensor>> {
    cond.sr.as_ref().map(|sr| sr.image(x.height(), x.width())).transpose()
}

fn check_grid(schedule: &NoiseSchedule, grid: &TimestepGrid) -> Result<()> {
    match grid.timesteps().last() {
        None => Err(Error::InvalidRange("empty timestep grid".into())),
        Some(&l) if l >= schedule.num_train_steps() => Err(Error::InvalidRange(format!(
            "grid timestep {l} outside a {}-step schedule",
            schedule.num_train_steps()
        ))),
        _ => Ok(()),
    }
}

fn new_trace(
    method: InversionMethod,
    schedule: &NoiseSchedule,
    grid: &TimestepGrid,
    cond: &StageCondition,
    null: Vec<Vec<f64>>,
    states: Vec<StateTensor>,
) -> InversionTrace {
    InversionTrace {
        stage: cond.stage,
        method,
        num_train_steps: schedule.num_train_steps(),
        grid: grid.clone(),
        inner_steps: 0,
        guidance: cond.guidance,
        cond_embedding: cond.prompt.vector.clone(),
        null_embeddings: null,
        conditioning: cond.sr.clone(),
        states,
        step_losses: Vec::new(),
    }
}

/// Deterministic DDIM inversion under guidance `cond.guidance` with the
/// zero null embedding.
pub fn ddim_invert(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    grid: &TimestepGrid,
    x0: &StateTensor,
    cond: &StageCondition,
) -> Result<InversionTrace> {
    cond.validate(model)?;
    check_grid(schedule, grid)?;
    x0.ensure_finite("input image")?;
    let ci = cond_image_for(cond, x0)?;
    let null = vec![0.0; model.cond_width()];
    let mut states = vec![x0.clone()];
    for k in 1..=grid.len() {
        let prev = &states[k - 1];
        let eps = guided_eps(
            model,
            prev,
            grid.model_timestep(k - 1),
            &cond.prompt.vector,
            &null,
            ci.as_ref(),
            cond.guidance,
        )?;
        let next = ddim_step_forward(schedule, prev, grid.level(k - 1), grid.level(k), &eps)?;
        next.ensure_finite(&format!("inverted state {k}"))?;
        states.push(next);
    }
    Ok(new_trace(
        InversionMethod::Ddim,
        schedule,
        grid,
        cond,
        vec![null; grid.len()],
        states,
    ))
}

/// Plain guided DDIM sampling from `noise`; the trace holds the sampling
/// path, so replaying it reproduces the sample bit for bit.
pub fn generate_stage(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    grid: &TimestepGrid,
    noise: &StateTensor,
    cond: &StageCondition,
) -> Result<InversionTrace> {
    cond.validate(model)?;
    check_grid(schedule, grid)?;
    let null = vec![0.0; model.cond_width()];
    let mut trace = new_trace(
        InversionMethod::Generated,
        schedule,
        grid,
        cond,
        vec![null; grid.len()],
        vec![noise.clone(); grid.len() + 1],
    );
    let path = replay_trajectory(&trace, model, schedule)?;
    trace.states = path;
    Ok(trace)
}

/// Backward pass from `states[T]` using the stored embeddings, guidance and
/// conditioning noise. Returns the replayed states indexed like
/// `trace.states`.
pub fn replay_trajectory(
    trace: &InversionTrace,
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
) -> Result<Vec<StateTensor>> {
    trace.check(Some(model))?;
    if schedule.num_train_steps() != trace.num_train_steps {
        return Err(Error::TraceMismatch(format!(
            "trace was made with a {}-step schedule, got {}",
            trace.num_train_steps,
            schedule.num_train_steps()
        )));
    }
    let grid = &trace.grid;
    let z_t = trace.noise();
    let ci = trace
        .conditioning
        .as_ref()
        .map(|sr| sr.image(z_t.height(), z_t.width()))
        .transpose()?;
    let mut path = vec![z_t.clone()];
    for k in (1..=grid.len()).rev() {
        let z = path.last().unwrap();
        let eps = guided_eps(
            model,
            z,
            grid.model_timestep(k),
            &trace.cond_embedding,
            &trace.null_embeddings[k - 1],
            ci.as_ref(),
            trace.guidance,
        )
        .map_err(mismatch_on_invariant)?;
        let prev = ddim_step_backward(schedule, z, grid.level(k), grid.level(k - 1), &eps)?;
        prev.ensure_finite(&format!("replayed state {}", k - 1))?;
        path.push(prev);
    }
    path.reverse();
    Ok(path)
}

/// A model refusing the trace's conditioning layout means the two do not
/// belong together.
fn mismatch_on_invariant(e: Error) -> Error {
    match e {
        Error::Invariant(m) => Error::TraceMismatch(m),
        Error::ShapeMismatch { expected, actual } => {
            Error::TraceMismatch(format!("expected {expected}, got {actual}"))
        }
        other => other,
    }
}

pub fn replay_reconstruction(
    trace: &InversionTrace,
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
) -> Result<StateTensor> {
    Ok(replay_trajectory(trace, model, schedule)?.swap_remove(0))
}

#[cfg(test)]
mod tests;
