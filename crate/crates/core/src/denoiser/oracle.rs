//! Analytic denoisers with exact posteriors.

use crate::denoiser::{DenoiserInput, VjpResult};
use crate::error::{Error, Result};
use crate::schedule::{NoiseSchedule, Timestep};
use crate::tensor::StateTensor;

fn noise_rates(schedule: &NoiseSchedule, t: usize) -> Result<(f64, f64)> {
    let ab = schedule.alpha_bar(Timestep::At(t))?;
    Ok((ab.sqrt(), (1.0 - ab).sqrt()))
}

/// Exact noise predictor for a point-mass data distribution at `anchor`.
///
/// Optional per-prompt anchors let two prompts denote two different images;
/// an embedding that matches none of them falls back to `anchor`.
#[derive(Debug, Clone)]
pub struct DeltaOracle {
    schedule: NoiseSchedule,
    anchor: StateTensor,
    prompt_anchors: Vec<(Vec<f64>, StateTensor)>,
    cond_width: usize,
}

impl DeltaOracle {
    pub fn new(schedule: NoiseSchedule, anchor: StateTensor, cond_width: usize) -> Self {
        Self {
            schedule,
            anchor,
            prompt_anchors: Vec::new(),
            cond_width,
        }
    }

    pub fn with_prompt_anchor(mut self, embedding: Vec<f64>, anchor: StateTensor) -> Result<Self> {
        self.anchor.check_same_shape(&anchor)?;
        self.prompt_anchors.push((embedding, anchor));
        Ok(self)
    }

    pub fn anchor(&self) -> &StateTensor {
        &self.anchor
    }

    pub fn cond_width(&self) -> usize {
        self.cond_width
    }

    fn anchor_for(&self, embedding: &[f64]) -> &StateTensor {
        self.prompt_anchors
            .iter()
            .find(|(e, _)| e.as_slice() == embedding)
            .map(|(_, a)| a)
            .unwrap_or(&self.anchor)
    }

    pub(crate) fn predict(&self, input: &DenoiserInput<'_>) -> Result<StateTensor> {
        let anchor = self.anchor_for(input.embedding);
        input.state.check_same_shape(anchor)?;
        let (sa, sn) = noise_rates(&self.schedule, input.timestep)?;
        input.state.lincomb(1.0 / sn, anchor, -sa / sn)
    }

    pub(crate) fn vjp(&self, input: &DenoiserInput<'_>, upstream: &StateTensor) -> Result<VjpResult> {
        let (_, sn) = noise_rates(&self.schedule, input.timestep)?;
        Ok(VjpResult {
            output: self.predict(input)?,
            grad_wrt_state: upstream.scale(1.0 / sn),
            // anchor selection is piecewise constant in the embedding
            grad_wrt_cond_embedding: vec![0.0; input.embedding.len()],
        })
    }
}

/// Exact noise predictor for an isotropic Gaussian prior `N(mean, std^2 I)`.
#[derive(Debug, Clone)]
pub struct GaussianOracle {
    schedule: NoiseSchedule,
    mean: StateTensor,
    std: f64,
    cond_width: usize,
}

impl GaussianOracle {
    pub fn new(schedule: NoiseSchedule, mean: StateTensor, std: f64, cond_width: usize) -> Result<Self> {
        if !(std > 0.0 && std.is_finite()) {
            return Err(Error::InvalidRange(format!("prior std must be positive, got {std}")));
        }
        Ok(Self {
            schedule,
            mean,
            std,
            cond_width,
        })
    }

    pub fn cond_width(&self) -> usize {
        self.cond_width
    }

    /// Posterior mean `E[x0 | z_t]`.
    pub fn posterior_mean(&self, z: &StateTensor, t: usize) -> Result<StateTensor> {
        let ab = self.schedule.alpha_bar(Timestep::At(t))?;
        let var = self.std * self.std;
        let denom = ab * var + (1.0 - ab);
        z.lincomb(var * ab.sqrt() / denom, &self.mean, (1.0 - ab) / denom)
    }

    pub(crate) fn predict(&self, input: &DenoiserInput<'_>) -> Result<StateTensor> {
        input.state.check_same_shape(&self.mean)?;
        let (sa, sn) = noise_rates(&self.schedule, input.timestep)?;
        let x0 = self.posterior_mean(input.state, input.timestep)?;
        input.state.lincomb(1.0 / sn, &x0, -sa / sn)
    }

    pub(crate) fn vjp(&self, input: &DenoiserInput<'_>, upstream: &StateTensor) -> Result<VjpResult> {
        let ab = self.schedule.alpha_bar(Timestep::At(input.timestep))?;
        let var = self.std * self.std;
        // d eps / d z = sqrt(1 - abar) / (abar var + 1 - abar), a scalar
        let slope = (1.0 - ab).sqrt() / (ab * var + 1.0 - ab);
        Ok(VjpResult {
            output: self.predict(input)?,
            grad_wrt_state: upstream.scale(slope),
            grad_wrt_cond_embedding: vec![0.0; input.embedding.len()],
        })
    }
}
