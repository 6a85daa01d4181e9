//! Three-stage pipeline: pyramid construction, per-stage inversion with
//! chained conditioning, replay and pure generation.

use std::fs;
use std::path::Path;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{load_model, save_model, DeltaOracle, DenoiserModel};
use crate::embedding::PromptTable;
use crate::error::{Error, Result};
use crate::inversion::{
    ddim_invert, generate_stage, iterinv_stage, null_text_invert, replay_reconstruction, InversionTrace,
    IterInvConfig, NtiConfig, SrConditioning, StageCondition,
};
use crate::metrics::MetricRecord;
use crate::schedule::{NoiseSchedule, TimestepGrid};
use crate::tensor::StateTensor;
use crate::trainer::check_resolutions;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseMethod {
    Ddim,
    Nti,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SrMethod {
    Ddim,
    IterInv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CascadeConfig {
    pub schema_version: u32,
    pub resolutions: [usize; 3],
    pub stage1_method: BaseMethod,
    pub sr_method: SrMethod,
    /// Stages below this one are sampled from seeded noise instead of
    /// inverted (1 inverts everything).
    pub invert_from_stage: usize,
    /// Condition super-resolution stages on the ground-truth pyramid instead
    /// of the previous stage's reconstruction.
    pub condition_on_ground_truth: bool,
    pub num_train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Step counts, guidance scales, conditioning noise and inner loop.
    pub iterinv: IterInvConfig,
    pub nti: NtiConfig,
    pub prompts: PromptTable,
    /// Seed for stages that are generated rather than inverted.
    pub generation_seed: u64,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            resolutions: [16, 32, 64],
            stage1_method: BaseMethod::Nti,
            sr_method: SrMethod::IterInv,
            invert_from_stage: 1,
            condition_on_ground_truth: false,
            num_train_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            iterinv: IterInvConfig::default(),
            nti: NtiConfig::default(),
            prompts: PromptTable::default(),
            generation_seed: 0,
        }
    }
}

impl CascadeConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "config schema version {} (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        check_resolutions(&self.resolutions)?;
        if !(1..=3).contains(&self.invert_from_stage) {
            return Err(Error::InvalidRange(format!(
                "invert_from_stage {} not in 1..=3",
                self.invert_from_stage
            )));
        }
        self.iterinv.validate()?;
        self.nti.validate()?;
        self.schedule()?;
        self.grid()?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.num_train_steps, self.beta_start, self.beta_end)
    }

    pub fn grid(&self) -> Result<TimestepGrid> {
        TimestepGrid::evenly_spaced(self.num_train_steps, self.iterinv.steps)
    }

    pub fn guidance(&self, stage: usize) -> f64 {
        self.iterinv.guidance[stage - 1]
    }

    /// Label of the method used at `stage` under this config.
    pub fn stage_method(&self, stage: usize) -> &'static str {
        match (stage < self.invert_from_stage, stage, self.stage1_method, self.sr_method) {
            (true, ..) => "generated",
            (false, 1, BaseMethod::Ddim, _) => "ddim",
            (false, 1, BaseMethod::Nti, _) => "nti",
            (false, _, _, SrMethod::Ddim) => "ddim",
            (false, _, _, SrMethod::IterInv) => "iterinv",
        }
    }
}

/// Mixes a base seed with a stage index.
pub fn stage_seed(seed: u64, stage: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (stage as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

/// One denoiser per stage, lowest resolution first.
#[derive(Debug, Clone)]
pub struct CascadeModels {
    pub stages: [DenoiserModel; 3],
}

impl CascadeModels {
    pub fn new(s1: DenoiserModel, s2: DenoiserModel, s3: DenoiserModel) -> Self {
        Self { stages: [s1, s2, s3] }
    }

    pub fn stage(&self, stage: usize) -> &DenoiserModel {
        &self.stages[stage - 1]
    }

    /// Delta oracles anchored at the three levels of `pyramid`.
    pub fn delta_oracles(pyramid: &[StateTensor; 3], schedule: &NoiseSchedule, cond_width: usize) -> Self {
        let [a, b, c] = pyramid.clone().map(|p| DeltaOracle::new(schedule.clone(), p, cond_width).into());
        Self::new(a, b, c)
    }

    pub fn file_name(stage: usize) -> String {
        format!("stage{stage}.model")
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let load = |s: usize| -> Result<DenoiserModel> {
            let p = dir.join(Self::file_name(s));
            load_model(&p).map(Into::into).map_err(|e| e.in_stage(s))
        };
        Ok(Self::new(load(1)?, load(2)?, load(3)?))
    }

    /// Writes every conv-net stage; oracle stages have no file form.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        for (i, m) in self.stages.iter().enumerate() {
            match m {
                DenoiserModel::ConvNet(net) => save_model(dir.as_ref().join(Self::file_name(i + 1)), net)?,
                _ => return Err(Error::Invariant(format!("stage {} is not a trainable model", i + 1))),
            }
        }
        Ok(())
    }
}

/// Area-average downsampling of a square image to the three stage
/// resolutions.
pub fn build_pyramid(image: &StateTensor, config: &CascadeConfig) -> Result<[StateTensor; 3]> {
    check_resolutions(&config.resolutions)?;
    let (h, w, _) = image.dims();
    let top = config.resolutions[2];
    if h != w || h < top || h % top != 0 {
        return Err(Error::shape(
            format!("a square image whose side is a multiple of {top}"),
            format!("{h}x{w}"),
        ));
    }
    let [a, b, c] = config.resolutions;
    Ok([image.resize_area(a, a)?, image.resize_area(b, b)?, image.resize_area(c, c)?])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeResult {
    pub config: CascadeConfig,
    pub prompt_id: u32,
    pub traces: Vec<InversionTrace>,
    pub reconstructions: Vec<StateTensor>,
    pub metrics: Vec<MetricRecord>,
}

impl CascadeResult {
    /// Highest-resolution reconstruction produced.
    pub fn top(&self) -> &StateTensor {
        self.reconstructions.last().expect("at least one stage")
    }

    pub fn top_metrics(&self) -> &MetricRecord {
        self.metrics.last().expect("at least one stage")
    }
}

fn stage_condition(
    stage: usize,
    config: &CascadeConfig,
    prompt_id: u32,
    prev: Option<&StateTensor>,
    seed: u64,
) -> Result<StageCondition> {
    let prompt = config.prompts.embed(prompt_id);
    let w = config.guidance(stage);
    Ok(match prev {
        None => StageCondition::base(prompt, w),
        Some(base) => StageCondition::super_res(
            stage,
            prompt,
            w,
            SrConditioning::new(base.clone(), config.iterinv.sigma_aug, stage_seed(seed, stage))?,
        ),
    })
}

fn check_models(models: &CascadeModels, config: &CascadeConfig) -> Result<()> {
    for (i, m) in models.stages.iter().enumerate() {
        if m.cond_width() != config.prompts.width {
            return Err(Error::shape(
                format!("prompt width {}", config.prompts.width),
                format!("stage {} model width {}", i + 1, m.cond_width()),
            ));
        }
    }
    Ok(())
}

/// Inverts an image through all three stages and replays every trace.
pub fn invert_cascade(
    models: &CascadeModels,
    image: &StateTensor,
    prompt_id: u32,
    config: &CascadeConfig,
) -> Result<CascadeResult> {
    invert_cascade_through(models, image, prompt_id, config, 3)
}

/// [`invert_cascade`] stopped after `last_stage`.
pub fn invert_cascade_through(
    models: &CascadeModels,
    image: &StateTensor,
    prompt_id: u32,
    config: &CascadeConfig,
    last_stage: usize,
) -> Result<CascadeResult> {
    crate::trainer::check_stage(last_stage)?;
    config.validate()?;
    check_models(models, config)?;
    let pyramid = build_pyramid(image, config)?;
    let schedule = config.schedule()?;
    let grid = config.grid()?;
    let mut traces = Vec::with_capacity(3);
    let mut recons: Vec<StateTensor> = Vec::with_capacity(3);
    let mut metrics = Vec::with_capacity(3);
    for stage in 1..=last_stage {
        let run = || -> Result<(InversionTrace, StateTensor)> {
            let model = models.stage(stage);
            let prev = match stage {
                1 => None,
                _ if config.condition_on_ground_truth => Some(&pyramid[stage - 2]),
                _ => recons.last(),
            };
            let method = config.stage_method(stage);
            if method == "generated" {
                let res = config.resolutions[stage - 1];
                let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(config.generation_seed, stage));
                let noise = StateTensor::randn(res, res, 3, &mut rng);
                let cond = stage_condition(stage, config, prompt_id, prev, config.generation_seed)?;
                let tr = generate_stage(model, &schedule, &grid, &noise, &cond)?;
                let out = tr.states[0].clone();
                return Ok((tr, out));
            }
            let cond = stage_condition(stage, config, prompt_id, prev, config.iterinv.noise_seed)?;
            let x = &pyramid[stage - 1];
            let tr = match method {
                "ddim" => ddim_invert(model, &schedule, &grid, x, &cond)?,
                "nti" => null_text_invert(model, &schedule, &grid, x, &cond, &config.nti)?,
                _ => iterinv_stage(model, &schedule, &grid, x, &cond, &config.iterinv)?,
            };
            let out = replay_reconstruction(&tr, model, &schedule)?;
            Ok((tr, out))
        };
        let (trace, recon) = run().map_err(|e| e.in_stage(stage))?;
        let m = MetricRecord::compute(config.stage_method(stage), stage, &recon, &pyramid[stage - 1])?;
        info!("stage {stage} ({}): psnr {:.2} dB", m.method, m.psnr_db);
        traces.push(trace);
        recons.push(recon);
        metrics.push(m);
    }
    Ok(CascadeResult {
        config: config.clone(),
        prompt_id,
        traces,
        reconstructions: recons,
        metrics,
    })
}

/// Replays stored traces; each carries its own conditioning, so stages are
/// independent of one another.
pub fn reconstruct_cascade(
    models: &CascadeModels,
    schedule: &NoiseSchedule,
    traces: &[InversionTrace],
) -> Result<Vec<StateTensor>> {
    traces
        .iter()
        .map(|t| replay_reconstruction(t, models.stage(t.stage), schedule).map_err(|e| e.in_stage(t.stage)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeGeneration {
    pub traces: Vec<InversionTrace>,
    pub images: Vec<StateTensor>,
}

impl CascadeGeneration {
    pub fn top(&self) -> &StateTensor {
        &self.images[2]
    }
}

/// Samples stage 1 from seeded noise and upsamples through stages 2 and 3,
/// each conditioned on the previous output plus augmentation noise.
pub fn generate_cascade(
    models: &CascadeModels,
    prompt_id: u32,
    seed: u64,
    config: &CascadeConfig,
) -> Result<CascadeGeneration> {
    generate_from(models, prompt_id, seed, config, None)
}

/// Like [`generate_cascade`] but starting from a given stage-1 image, which
/// is only upsampled.
pub fn upsample_cascade(
    models: &CascadeModels,
    base: &StateTensor,
    prompt_id: u32,
    seed: u64,
    config: &CascadeConfig,
) -> Result<CascadeGeneration> {
    generate_from(models, prompt_id, seed, config, Some(base))
}

fn generate_from(
    models: &CascadeModels,
    prompt_id: u32,
    seed: u64,
    config: &CascadeConfig,
    base: Option<&StateTensor>,
) -> Result<CascadeGeneration> {
    config.validate()?;
    check_models(models, config)?;
    let schedule = config.schedule()?;
    let grid = config.grid()?;
    let mut traces = Vec::new();
    let mut images: Vec<StateTensor> = Vec::new();
    if let Some(b) = base {
        let r = config.resolutions[0];
        if b.dims() != (r, r, 3) {
            return Err(Error::shape(format!("{r}x{r}x3 base image"), format!("{:?}", b.dims())));
        }
        images.push(b.clone());
    }
    for stage in images.len() + 1..=3 {
        let res = config.resolutions[stage - 1];
        let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(seed, stage));
        let noise = StateTensor::randn(res, res, 3, &mut rng);
        let cond = stage_condition(stage, config, prompt_id, images.last(), seed).map_err(|e| e.in_stage(stage))?;
        let tr = generate_stage(models.stage(stage), &schedule, &grid, &noise, &cond).map_err(|e| e.in_stage(stage))?;
        images.push(tr.states[0].clone());
        traces.push(tr);
    }
    Ok(CascadeGeneration { traces, images })
}
