//! Procedural toy dataset and epsilon-prediction training for each stage.

mod dataset;

pub use dataset::{
    class_of, generate_shapes, shape_of, PrototypeClassifier, Scene, ShapeKind, ShapeSample,
    MAX_CLASSES, NUM_COLOR_PAIRS, NUM_SHAPES,
};

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{ConvNet, ConvNetMeta, DenoiserInput, OutputSkip};
use crate::embedding::PromptTable;
use crate::error::{Error, Result};
use crate::schedule::{q_sample, NoiseSchedule, Timestep};
use crate::tensor::StateTensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Per-stage override of `epochs`, lowest resolution first.
    pub stage_epochs: Option<[usize; 3]>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Anneal the learning rate to zero along a half cosine.
    pub cosine_decay: bool,
    pub seed: u64,
    pub dataset_size: usize,
    pub num_classes: usize,
    pub resolutions: [usize; 3],
    pub widths: [usize; 3],
    /// Use the noise-level dependent output skip instead of `eps = state + net`.
    pub preconditioned: bool,
    /// Probability of training a sample with the null embedding.
    pub uncond_prob: f64,
    /// Gaussian noise added to the upsampled conditioning image.
    pub sigma_aug: f64,
    /// Random square crop used for the top stage; `None` trains on full frames.
    pub top_stage_crop: Option<usize>,
    pub probe_size: usize,
    pub prompts: PromptTable,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 125,
            stage_epochs: None,
            batch_size: 16,
            learning_rate: 1e-3,
            momentum: 0.9,
            cosine_decay: true,
            seed: 0,
            dataset_size: 256,
            num_classes: 16,
            resolutions: [16, 32, 64],
            widths: [16, 32, 32],
            preconditioned: true,
            uncond_prob: 0.1,
            sigma_aug: 0.05,
            top_stage_crop: None,
            probe_size: 32,
            prompts: PromptTable::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidRange(m));
        if self.epochs == 0
            || self.batch_size == 0
            || self.dataset_size == 0
            || self.stage_epochs.is_some_and(|e| e.contains(&0))
        {
            return bad("epochs, batch_size and dataset_size must be positive".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} not in [0, 1)", self.momentum));
        }
        if !(0.0..=1.0).contains(&self.uncond_prob) {
            return bad(format!("uncond_prob {} not in [0, 1]", self.uncond_prob));
        }
        if !(self.sigma_aug >= 0.0) {
            return bad(format!("sigma_aug {}", self.sigma_aug));
        }
        if self.num_classes == 0 || self.num_classes > MAX_CLASSES {
            return bad(format!("num_classes {} not in 1..={MAX_CLASSES}", self.num_classes));
        }
        check_resolutions(&self.resolutions)?;
        if let Some(c) = self.top_stage_crop {
            if c == 0 || c > self.resolutions[2] {
                return bad(format!("crop {c} outside 1..={}", self.resolutions[2]));
            }
        }
        Ok(())
    }

    pub fn epochs_for(&self, stage: usize) -> usize {
        self.stage_epochs.map_or(self.epochs, |e| e[stage - 1])
    }

    pub fn meta(&self, stage: usize, schedule: &NoiseSchedule) -> ConvNetMeta {
        let cond_channels = if stage == 1 { 0 } else { 3 };
        let meta = ConvNetMeta::new(3, cond_channels, self.prompts.width).with_widths(self.widths);
        if self.preconditioned {
            meta.with_skip(OutputSkip::preconditioned(schedule))
        } else {
            meta
        }
    }
}

/// Strictly increasing resolutions, each dividing the next.
pub fn check_resolutions(res: &[usize; 3]) -> Result<()> {
    let ok = res[0] > 0 && (0..2).all(|i| res[i + 1] > res[i] && res[i + 1] % res[i] == 0);
    if !ok {
        return Err(Error::Invariant(format!(
            "resolutions {res:?} must increase with each dividing the next"
        )));
    }
    Ok(())
}

pub fn check_stage(stage: usize) -> Result<()> {
    if !(1..=3).contains(&stage) {
        return Err(Error::InvalidRange(format!("stage {stage} not in 1..=3")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: usize,
    pub steps: usize,
    pub param_count: usize,
    /// Probe-set loss before the first update.
    pub initial_loss: f64,
    /// Probe-set loss after the last update.
    pub final_loss: f64,
    /// Mean minibatch loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub config: TrainConfig,
}

/// Conditioning image: `lowres + sigma * noise` at its own resolution,
/// then bilinearly upsampled to `res`.
pub fn sr_conditioning(lowres: &StateTensor, res: usize, sigma: f64, noise: &StateTensor) -> Result<StateTensor> {
    Ok(lowres.lincomb(1.0, noise, sigma)?.resize_bilinear(res, res))
}

/// One fully drawn training example.
struct Example {
    x0: StateTensor,
    z: StateTensor,
    eps: StateTensor,
    t: usize,
    embedding: Vec<f64>,
    cond: Option<StateTensor>,
}

fn draw_example(
    sample: &ShapeSample,
    stage: usize,
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
    crop: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<Example> {
    let res = cfg.resolutions[stage - 1];
    let t = rng.gen_range(0..schedule.num_train_steps());
    let uncond = rng.gen_bool(cfg.uncond_prob);
    let embedding = if uncond {
        cfg.prompts.null().vector
    } else {
        cfg.prompts.embed(sample.prompt_id).vector
    };
    let mut x0 = sample.image_pyramid[stage - 1].clone();
    let mut cond = if stage > 1 {
        let low = &sample.image_pyramid[stage - 2];
        let noise = StateTensor::randn(low.height(), low.width(), 3, rng);
        Some(sr_conditioning(low, res, cfg.sigma_aug, &noise)?)
    } else {
        None
    };
    if let Some(c) = crop.filter(|&c| c < res) {
        let (y0, x0_) = (rng.gen_range(0..=res - c), rng.gen_range(0..=res - c));
        x0 = x0.crop(y0, x0_, c, c)?;
        cond = cond.map(|ci| ci.crop(y0, x0_, c, c)).transpose()?;
    }
    let (h, w, ch) = x0.dims();
    let eps = StateTensor::randn(h, w, ch, rng);
    let z = q_sample(schedule, &x0, Timestep::At(t), &eps)?;
    Ok(Example {
        x0,
        z,
        eps,
        t,
        embedding,
        cond,
    })
}

/// Squared error summed over the example, and its gradient w.r.t. the params
/// when requested.
fn example_loss(net: &ConvNet, ex: &Example, want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
    let input = DenoiserInput::new(&ex.z, ex.t, &ex.embedding).with_cond_image(ex.cond.as_ref());
    debug_assert!(ex.x0.same_shape(&ex.z));
    if want_grad {
        // loss is linear in nothing, so evaluate once to get the residual
        let pred = net.forward(&input)?;
        let resid = pred.sub(&ex.eps)?;
        let (_, g) = net.param_vjp(&input, &resid.scale(2.0))?;
        Ok((resid.sum_sq(), Some(g)))
    } else {
        let pred = net.forward(&input)?;
        Ok((pred.sub(&ex.eps)?.sum_sq(), None))
    }
}

/// Mean per-element MSE on a fixed probe set drawn from `seed`.
pub fn probe_loss(
    net: &ConvNet,
    stage: usize,
    dataset: &[ShapeSample],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9_0be5 ^ stage as u64);
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..cfg.probe_size {
        let sample = &dataset[(i * 7919) % dataset.len()];
        let ex = draw_example(sample, stage, cfg, schedule, None, &mut rng)?;
        total += example_loss(net, &ex, false)?.0;
        count += ex.eps.len();
    }
    Ok(total / count as f64)
}

/// Trains one stage's noise predictor with SGD plus momentum on the
/// per-element mean squared epsilon error. Deterministic given `cfg.seed`.
pub fn train_stage(
    stage: usize,
    dataset: &[ShapeSample],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<(ConvNet, TrainReport)> {
    check_stage(stage)?;
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidRange("empty dataset".into()));
    }
    for s in dataset {
        let r = cfg.resolutions[stage - 1];
        if s.image_pyramid[stage - 1].dims() != (r, r, 3) {
            return Err(Error::shape(format!("{r}x{r}x3 stage-{stage} images"), format!("{:?}", s.image_pyramid[stage - 1].dims())));
        }
    }
    let stage_seed = cfg.seed.wrapping_mul(31).wrapping_add(stage as u64);
    let mut net = ConvNet::init(cfg.meta(stage, schedule), stage_seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed ^ 0x7ea1_1);
    let crop = if stage == 3 { cfg.top_stage_crop } else { None };
    let initial_loss = probe_loss(&net, stage, dataset, schedule, cfg)?;
    info!("stage {stage}: {} params, initial probe loss {initial_loss:.4}", net.params().len());

    let mut velocity = vec![0.0; net.params().len()];
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let epochs = cfg.epochs_for(stage);
    let mut epoch_losses = Vec::with_capacity(epochs);
    let mut steps = 0usize;
    let total_steps = epochs * dataset.len().div_ceil(cfg.batch_size);
    for epoch in 0..epochs {
        // Fisher-Yates with our own rng for bit-exact reruns
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let mut epoch_sum = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = vec![0.0; velocity.len()];
            let mut loss = 0.0;
            let mut elems = 0usize;
            for &i in batch {
                let ex = draw_example(&dataset[i], stage, cfg, schedule, crop, &mut rng)?;
                let (l, g) = example_loss(&net, &ex, true)?;
                loss += l;
                elems += ex.eps.len();
                grad.iter_mut().zip(g.unwrap()).for_each(|(a, b)| *a += b);
            }
            let loss = loss / elems as f64;
            if !loss.is_finite() {
                return Err(Error::Divergence { step: steps, loss });
            }
            let inv = 1.0 / elems as f64;
            let lr = if cfg.cosine_decay {
                let frac = steps as f64 / total_steps as f64;
                cfg.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
            } else {
                cfg.learning_rate
            };
            for ((p, v), g) in net.params_mut().iter_mut().zip(&mut velocity).zip(&grad) {
                *v = cfg.momentum * *v + g * inv;
                *p -= lr * *v;
            }
            epoch_sum += loss;
            batches += 1;
            steps += 1;
        }
        epoch_losses.push(epoch_sum / batches as f64);
        debug!("stage {stage} epoch {epoch}: loss {:.5}", epoch_losses[epoch]);
    }
    if net.params().iter().any(|p| !p.is_finite()) {
        return Err(Error::Divergence {
            step: steps,
            loss: f64::NAN,
        });
    }
    let final_loss = probe_loss(&net, stage, dataset, schedule, cfg)?;
    info!("stage {stage}: final probe loss {final_loss:.4} after {steps} steps");
    let report = TrainReport {
        stage,
        steps,
        param_count: net.params().len(),
        initial_loss,
        final_loss,
        epoch_losses,
        config: cfg.clone(),
    };
    Ok((net, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 4,
            dataset_size: 8,
            resolutions: [4, 8, 16],
            widths: [4, 4, 4],
            probe_size: 8,
            learning_rate: 0.05,
            ..Default::default()
        }
    }

    #[test]
    fn one_epoch_reduces_probe_loss() {
        let cfg = tiny();
        let data = generate_shapes(cfg.dataset_size, cfg.num_classes, cfg.resolutions, 1).unwrap();
        let sched = NoiseSchedule::default();
        for stage in 1..=3 {
            let (_, rep) = train_stage(stage, &data, &sched, &cfg).unwrap();
            assert_eq!(rep.steps, 2);
            assert!(rep.final_loss < rep.initial_loss, "stage {stage}: {rep:?}");
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_untouched() {
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..tiny()
        };
        let data = generate_shapes(8, 16, cfg.resolutions, 1).unwrap();
        let sched = NoiseSchedule::default();
        let (net, rep) = train_stage(2, &data, &sched, &cfg).unwrap();
        let fresh = ConvNet::init(cfg.meta(2, &sched), cfg.seed.wrapping_mul(31).wrapping_add(2)).unwrap();
        assert!(net.params().iter().zip(fresh.params()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(rep.initial_loss.to_bits(), rep.final_loss.to_bits());
    }

    #[test]
    fn training_is_bit_reproducible() {
        let cfg = tiny();
        let data = generate_shapes(8, 16, cfg.resolutions, 2).unwrap();
        let sched = NoiseSchedule::default();
        let a = train_stage(1, &data, &sched, &cfg).unwrap();
        let b = train_stage(1, &data, &sched, &cfg).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn bad_configs_are_rejected() {
        let data = generate_shapes(4, 16, [4, 8, 16], 1).unwrap();
        let sched = NoiseSchedule::default();
        assert!(train_stage(4, &data, &sched, &tiny()).is_err());
        let cfg = TrainConfig { resolutions: [4, 6, 16], ..tiny() };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig { momentum: 1.0, ..tiny() };
        assert!(cfg.validate().is_err());
        // dataset rendered at the wrong resolution
        let cfg = TrainConfig { resolutions: [8, 16, 32], ..tiny() };
        assert!(train_stage(1, &data, &sched, &cfg).is_err());
    }
}
