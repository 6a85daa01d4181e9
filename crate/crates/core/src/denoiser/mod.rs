//! The noise predictor `eps_theta` and its differentiability contract.
//!
//! Inversion inner loops need vector-Jacobian products with respect to the
//! noisy state and the conditioning embedding; training needs them with
//! respect to the parameters. Every model kind supplies both.

mod convnet;
pub(crate) mod file;
mod oracle;

pub use convnet::{ConvNet, ConvNetMeta, OutputSkip};
pub use file::{decode_model, encode_model, load_model, save_model, MODEL_MAGIC};
pub use oracle::{DeltaOracle, GaussianOracle};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::StateTensor;

/// Everything one `eps_theta` evaluation consumes.
#[derive(Debug, Clone, Copy)]
pub struct DenoiserInput<'a> {
    pub state: &'a StateTensor,
    pub timestep: usize,
    /// Prompt or null embedding.
    pub embedding: &'a [f64],
    /// Low-resolution conditioning, already resized to the state's
    /// height and width. Only super-resolution stages take one.
    pub cond_image: Option<&'a StateTensor>,
}

impl<'a> DenoiserInput<'a> {
    pub fn new(state: &'a StateTensor, timestep: usize, embedding: &'a [f64]) -> Self {
        Self {
            state,
            timestep,
            embedding,
            cond_image: None,
        }
    }

    pub fn with_cond_image(mut self, cond_image: Option<&'a StateTensor>) -> Self {
        self.cond_image = cond_image;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VjpResult {
    pub output: StateTensor,
    pub grad_wrt_state: StateTensor,
    pub grad_wrt_cond_embedding: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    DeltaOracle,
    GaussianOracle,
    ConvNet,
}

#[derive(Debug, Clone)]
pub enum DenoiserModel {
    DeltaOracle(DeltaOracle),
    GaussianOracle(GaussianOracle),
    ConvNet(ConvNet),
}

impl DenoiserModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            DenoiserModel::DeltaOracle(_) => ModelKind::DeltaOracle,
            DenoiserModel::GaussianOracle(_) => ModelKind::GaussianOracle,
            DenoiserModel::ConvNet(_) => ModelKind::ConvNet,
        }
    }

    /// Width of the conditioning embedding the model accepts.
    pub fn cond_width(&self) -> usize {
        match self {
            DenoiserModel::DeltaOracle(m) => m.cond_width(),
            DenoiserModel::GaussianOracle(m) => m.cond_width(),
            DenoiserModel::ConvNet(m) => m.meta().cond_dim,
        }
    }

    /// Flat parameter vector; empty for the analytic oracles.
    pub fn parameters(&self) -> &[f64] {
        match self {
            DenoiserModel::ConvNet(m) => m.params(),
            _ => &[],
        }
    }

    pub fn predict_eps(&self, input: &DenoiserInput<'_>) -> Result<StateTensor> {
        self.validate(input)?;
        let out = match self {
            DenoiserModel::DeltaOracle(m) => m.predict(input)?,
            DenoiserModel::GaussianOracle(m) => m.predict(input)?,
            DenoiserModel::ConvNet(m) => m.forward(input)?,
        };
        out.ensure_finite("denoiser output")?;
        Ok(out)
    }

    /// Prediction plus `J^T upstream` for the state and the embedding.
    pub fn predict_eps_with_vjp(
        &self,
        input: &DenoiserInput<'_>,
        upstream: &StateTensor,
    ) -> Result<VjpResult> {
        self.validate(input)?;
        input.state.check_same_shape(upstream)?;
        let res = match self {
            DenoiserModel::DeltaOracle(m) => m.vjp(input, upstream)?,
            DenoiserModel::GaussianOracle(m) => m.vjp(input, upstream)?,
            DenoiserModel::ConvNet(m) => m.vjp(input, upstream)?,
        };
        res.output.ensure_finite("denoiser output")?;
        res.grad_wrt_state.ensure_finite("state gradient")?;
        Ok(res)
    }

    /// Forward pass whose intermediates are kept, so any number of
    /// vector-Jacobian products can follow without recomputing it.
    pub fn evaluate(&self, input: &DenoiserInput<'_>) -> Result<Evaluation<'_>> {
        self.validate(input)?;
        let (output, cache) = match self {
            DenoiserModel::ConvNet(m) => {
                let (out, f) = m.forward_cached(input)?;
                (out, Some(f))
            }
            _ => (self.predict_eps(input)?, None),
        };
        output.ensure_finite("denoiser output")?;
        Ok(Evaluation {
            model: self,
            state: input.state.clone(),
            timestep: input.timestep,
            embedding: input.embedding.to_vec(),
            cond_image: input.cond_image.cloned(),
            output,
            cache,
        })
    }

    /// `J_params^T upstream`; empty for oracles.
    pub fn train_vjp(&self, input: &DenoiserInput<'_>, upstream: &StateTensor) -> Result<Vec<f64>> {
        self.validate(input)?;
        input.state.check_same_shape(upstream)?;
        match self {
            DenoiserModel::ConvNet(m) => Ok(m.param_vjp(input, upstream)?.1),
            _ => Ok(Vec::new()),
        }
    }

    fn validate(&self, input: &DenoiserInput<'_>) -> Result<()> {
        input.state.ensure_finite("denoiser input state")?;
        crate::embedding::check_width(input.embedding, self.cond_width())?;
        if let Some(ci) = input.cond_image {
            if ci.height() != input.state.height() || ci.width() != input.state.width() {
                return Err(Error::shape(
                    format!("cond image {}x{}", input.state.height(), input.state.width()),
                    format!("{}x{}", ci.height(), ci.width()),
                ));
            }
            ci.ensure_finite("conditioning image")?;
        }
        Ok(())
    }
}

/// A retained forward pass; see [`DenoiserModel::evaluate`].
pub struct Evaluation<'m> {
    model: &'m DenoiserModel,
    state: StateTensor,
    timestep: usize,
    embedding: Vec<f64>,
    cond_image: Option<StateTensor>,
    output: StateTensor,
    cache: Option<convnet::Forward>,
}

impl<'m> Evaluation<'m> {
    pub fn output(&self) -> &StateTensor {
        &self.output
    }

    pub fn state(&self) -> &StateTensor {
        &self.state
    }

    pub fn into_output(self) -> StateTensor {
        self.output
    }

    /// `(J_state^T upstream, J_embedding^T upstream)`.
    pub fn vjp(&self, upstream: &StateTensor) -> Result<(StateTensor, Vec<f64>)> {
        self.state.check_same_shape(upstream)?;
        let input = DenoiserInput::new(&self.state, self.timestep, &self.embedding)
            .with_cond_image(self.cond_image.as_ref());
        let (gs, ge) = match (self.model, &self.cache) {
            (DenoiserModel::ConvNet(m), Some(f)) => m.input_vjp(f, &input, upstream)?,
            (DenoiserModel::DeltaOracle(m), _) => split(m.vjp(&input, upstream)?),
            (DenoiserModel::GaussianOracle(m), _) => split(m.vjp(&input, upstream)?),
            (DenoiserModel::ConvNet(_), None) => unreachable!("conv evaluations keep their cache"),
        };
        gs.ensure_finite("state gradient")?;
        Ok((gs, ge))
    }
}

fn split(r: VjpResult) -> (StateTensor, Vec<f64>) {
    (r.grad_wrt_state, r.grad_wrt_cond_embedding)
}

impl From<ConvNet> for DenoiserModel {
    fn from(m: ConvNet) -> Self {
        DenoiserModel::ConvNet(m)
    }
}

impl From<DeltaOracle> for DenoiserModel {
    fn from(m: DeltaOracle) -> Self {
        DenoiserModel::DeltaOracle(m)
    }
}

impl From<GaussianOracle> for DenoiserModel {
    fn from(m: GaussianOracle) -> Self {
        DenoiserModel::GaussianOracle(m)
    }
}
