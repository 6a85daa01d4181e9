//! Mask-guided editing at the base stage.
//!
//! A relevance map marks where the source and target prompts disagree about
//! the noise. The image is DDIM-encoded part of the way under the source
//! prompt and decoded under the target prompt, with everything outside the
//! mask pinned to the stored encoding states. Stages 2 and 3 then upsample
//! the edited base image generatively.

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cascade::{stage_seed, upsample_cascade, CascadeConfig, CascadeModels};
use crate::denoiser::{DenoiserInput, DenoiserModel};
use crate::embedding::PromptEmbedding;
use crate::error::{Error, Result};
use crate::inversion::{ddim_invert, guided_eps, StageCondition};
use crate::schedule::{ddim_step_backward, q_sample, NoiseSchedule, Timestep, TimestepGrid};
use crate::tensor::StateTensor;

/// Relevance maps whose spread is below this are treated as flat.
const FLAT_RELEVANCE: f64 = 1e-12;
const BLUR_SIGMA: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct EditRequest {
    /// Stage-1 or top-resolution image; the latter is area-downsampled.
    pub image: StateTensor,
    pub source_prompt_id: u32,
    pub target_prompt_id: u32,
    /// Fraction of the grid to encode through, in `(0, 1]`.
    pub encode_ratio: f64,
    /// Relevance cut in `[0, 1]`; 0 selects every pixel, 1 none.
    pub mask_threshold: f64,
    pub num_mask_seeds: usize,
    /// Guidance used while decoding under the target prompt.
    pub guidance: f64,
    pub seed: u64,
}

impl EditRequest {
    pub fn new(image: StateTensor, source_prompt_id: u32, target_prompt_id: u32) -> Self {
        Self {
            image,
            source_prompt_id,
            target_prompt_id,
            encode_ratio: 0.8,
            mask_threshold: 0.5,
            num_mask_seeds: 8,
            guidance: 3.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.source_prompt_id == self.target_prompt_id {
            return Err(Error::Invariant(format!(
                "source and target prompt are both {}; the edit mask is undefined",
                self.source_prompt_id
            )));
        }
        if !(self.encode_ratio > 0.0 && self.encode_ratio <= 1.0) {
            return Err(Error::InvalidRange(format!("encode_ratio {} not in (0, 1]", self.encode_ratio)));
        }
        if !(0.0..=1.0).contains(&self.mask_threshold) {
            return Err(Error::InvalidRange(format!("mask_threshold {} not in [0, 1]", self.mask_threshold)));
        }
        if self.num_mask_seeds == 0 {
            return Err(Error::InvalidRange("num_mask_seeds must be positive".into()));
        }
        if !self.guidance.is_finite() {
            return Err(Error::InvalidRange(format!("guidance {}", self.guidance)));
        }
        self.image.ensure_finite("edit image")
    }

    /// Number of grid steps the source encoding runs through.
    pub fn encode_steps(&self, grid_len: usize) -> usize {
        ((self.encode_ratio * grid_len as f64).ceil() as usize).clamp(1, grid_len)
    }
}

/// Binary edit region plus the normalised relevance it was cut from.
#[derive(Debug, Clone, PartialEq)]
pub struct EditMask {
    /// One channel, values in `{0, 1}`.
    pub mask: StateTensor,
    /// One channel, values in `[0, 1]`.
    pub relevance: StateTensor,
    pub threshold: f64,
}

impl EditMask {
    /// `relevance > threshold`, except that a non-positive threshold keeps
    /// every pixel (the minimum of a normalised map is exactly 0).
    pub fn from_relevance(relevance: StateTensor, threshold: f64) -> Self {
        let mask = relevance.map(|r| if r > threshold || threshold <= 0.0 { 1.0 } else { 0.0 });
        Self {
            mask,
            relevance,
            threshold,
        }
    }

    pub fn area(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m >= 0.5).count()
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    /// Intersection over union with another binary mask; 1 when both are empty.
    pub fn iou(&self, other: &StateTensor) -> Result<f64> {
        self.mask.check_same_shape(other)?;
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.mask.data().iter().zip(other.data()) {
            let (a, b) = (a >= 0.5, b >= 0.5);
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
    }
}

/// Noise-difference relevance at mid-schedule, averaged over seeded
/// noisings and channels, blurred and min-max normalised.
pub fn estimate_mask(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    image: &StateTensor,
    source: &PromptEmbedding,
    target: &PromptEmbedding,
    request: &EditRequest,
) -> Result<EditMask> {
    request.validate()?;
    image.ensure_finite("edit image")?;
    let t = schedule.num_train_steps() / 2;
    let (h, w, c) = image.dims();
    let mut acc = vec![0.0; h * w];
    for i in 0..request.num_mask_seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(request.seed, 100 + i));
        let noise = StateTensor::randn(h, w, c, &mut rng);
        let z = q_sample(schedule, image, Timestep::At(t), &noise)?;
        let es = model.predict_eps(&DenoiserInput::new(&z, t, &source.vector))?;
        let et = model.predict_eps(&DenoiserInput::new(&z, t, &target.vector))?;
        let diff = es.sub(&et)?.map(f64::abs).channel_mean();
        acc.iter_mut().zip(diff.data()).for_each(|(a, d)| *a += d);
    }
    let n = request.num_mask_seeds as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    let blurred = gaussian_blur(&acc, h, w, BLUR_SIGMA);
    let (lo, hi) = blurred
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let relevance: Vec<f64> = if hi - lo < FLAT_RELEVANCE {
        vec![0.0; h * w]
    } else {
        blurred.iter().map(|v| (v - lo) / (hi - lo)).collect()
    };
    let relevance = StateTensor::new(h, w, 1, relevance)?;
    relevance.ensure_finite("relevance map")?;
    Ok(EditMask::from_relevance(relevance, request.mask_threshold))
}

/// Separable Gaussian blur, truncated at 3 sigma, renormalised at borders.
fn gaussian_blur(img: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let (mut sum, mut norm) = (0.0, 0.0);
                for (k, d) in (-r..=r).enumerate() {
                    let (yy, xx) = if horizontal { (y as isize, x as isize + d) } else { (y as isize + d, x as isize) };
                    if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                        continue;
                    }
                    sum += kernel[k] * src[yy as usize * w + xx as usize];
                    norm += kernel[k];
                }
                out[y * w + x] = sum / norm;
            }
        }
        out
    };
    pass(&pass(img, true), false)
}

/// Everything an edit produces.
#[derive(Debug, Clone)]
pub struct EditResult {
    pub mask: EditMask,
    pub encode_steps: usize,
    /// Source encoding states `0..=encode_steps`.
    pub encoding: Vec<StateTensor>,
    /// Decoded base-stage states indexed like `encoding`.
    pub decoding: Vec<StateTensor>,
    /// Edited images, lowest resolution first.
    pub images: Vec<StateTensor>,
}

impl EditResult {
    pub fn base(&self) -> &StateTensor {
        &self.images[0]
    }

    pub fn top(&self) -> &StateTensor {
        self.images.last().expect("three stages")
    }
}

/// Edits the base stage, then upsamples the result through stages 2 and 3.
pub fn edit_image(models: &CascadeModels, request: &EditRequest, config: &CascadeConfig) -> Result<EditResult> {
    request.validate()?;
    config.validate()?;
    let schedule = config.schedule()?;
    let grid = config.grid()?;
    let base = base_image(&request.image, config)?;
    let model = models.stage(1);
    let src = config.prompts.embed(request.source_prompt_id);
    let tgt = config.prompts.embed(request.target_prompt_id);
    let mask = estimate_mask(model, &schedule, &base, &src, &tgt, request).map_err(|e| e.in_stage(1))?;
    if mask.is_empty() {
        warn!("edit mask is empty; the edit reduces to a reconstruction");
    }
    let (encoding, decoding) =
        masked_edit(model, &schedule, &grid, &base, &src, &tgt, &mask.mask, request).map_err(|e| e.in_stage(1))?;
    let edited = decoding[0].clone();
    let up = upsample_cascade(models, &edited, request.target_prompt_id, request.seed, config)?;
    Ok(EditResult {
        mask,
        encode_steps: encoding.len() - 1,
        encoding,
        decoding,
        images: up.images,
    })
}

fn base_image(image: &StateTensor, config: &CascadeConfig) -> Result<StateTensor> {
    let [r1, _, r3] = config.resolutions;
    match image.dims() {
        (h, w, 3) if h == r1 && w == r1 => Ok(image.clone()),
        (h, w, 3) if h == r3 && w == r3 => image.resize_area(r1, r1),
        d => Err(Error::shape(format!("{r1}x{r1}x3 or {r3}x{r3}x3 image"), format!("{d:?}"))),
    }
}

/// Encode under the source prompt through `ceil(rT)` steps, then decode
/// under the target prompt, restoring the stored encoding state outside the
/// mask after every step. Returns `(encoding, decoding)`.
#[allow(clippy::too_many_arguments)]
pub fn masked_edit(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    grid: &TimestepGrid,
    image: &StateTensor,
    source: &PromptEmbedding,
    target: &PromptEmbedding,
    mask: &StateTensor,
    request: &EditRequest,
) -> Result<(Vec<StateTensor>, Vec<StateTensor>)> {
    let (h, w, _) = image.dims();
    if mask.dims() != (h, w, 1) {
        return Err(Error::shape(format!("{h}x{w}x1 mask"), format!("{:?}", mask.dims())));
    }
    let k = request.encode_steps(grid.len());
    let prefix = TimestepGrid::from_timesteps(grid.timesteps()[..k].to_vec(), schedule.num_train_steps())?;
    let encoding = ddim_invert(model, schedule, &prefix, image, &StageCondition::base(source.clone(), 1.0))?.states;

    let null = vec![0.0; model.cond_width()];
    let hw = h * w;
    let mut decoding = vec![encoding[k].clone()];
    for j in (1..=k).rev() {
        let z = decoding.last().unwrap();
        let eps = guided_eps(model, z, grid.model_timestep(j), &target.vector, &null, None, request.guidance)?;
        let mut prev = ddim_step_backward(schedule, z, grid.level(j), grid.level(j - 1), &eps)?;
        let keep = encoding[j - 1].data();
        for (i, v) in prev.data_mut().iter_mut().enumerate() {
            if mask.data()[i % hw] < 0.5 {
                *v = keep[i];
            }
        }
        prev.ensure_finite(&format!("edited state {}", j - 1))?;
        decoding.push(prev);
    }
    decoding.reverse();
    debug_assert_eq!(decoding.len(), k + 1);
    Ok((encoding, decoding))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DeltaOracle;
    use crate::embedding::PromptTable;
    use proptest::prelude::*;

    fn quadrant_pair(res: usize) -> (StateTensor, StateTensor, StateTensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = StateTensor::randn(res, res, 3, &mut rng).map(|v| (0.4 * v).clamp(-1.0, 1.0));
        let mut b = a.clone();
        let mut truth = StateTensor::zeros(res, res, 1);
        for y in 0..res / 2 {
            for x in res / 2..res {
                truth.set(0, y, x, 1.0);
                for ch in 0..3 {
                    b.set(ch, y, x, -a.get(ch, y, x) + 0.5);
                }
            }
        }
        (a, b, truth)
    }

    fn two_prompt_oracle(a: &StateTensor, b: &StateTensor, table: &PromptTable) -> DenoiserModel {
        DeltaOracle::new(NoiseSchedule::default(), a.clone(), table.width)
            .with_prompt_anchor(table.embed(1).vector, a.clone())
            .unwrap()
            .with_prompt_anchor(table.embed(2).vector, b.clone())
            .unwrap()
            .into()
    }

    #[test]
    fn delta_oracle_mask_covers_changed_quadrant() {
        let table = PromptTable::default();
        let (a, b, truth) = quadrant_pair(16);
        let model = two_prompt_oracle(&a, &b, &table);
        let req = EditRequest::new(a.clone(), 1, 2);
        let m = estimate_mask(&model, &NoiseSchedule::default(), &a, &table.embed(1), &table.embed(2), &req).unwrap();
        assert!(m.iou(&truth).unwrap() >= 0.8, "iou {}", m.iou(&truth).unwrap());
        assert!(m.relevance.data().iter().all(|r| (0.0..=1.0).contains(r)));
    }

    #[test]
    fn identical_embeddings_give_flat_relevance_and_threshold_one_is_empty() {
        let table = PromptTable::default();
        let (a, _, _) = quadrant_pair(8);
        let model: DenoiserModel = DeltaOracle::new(NoiseSchedule::default(), a.clone(), table.width).into();
        let req = EditRequest::new(a.clone(), 1, 2);
        let e = table.embed(1);
        let m = estimate_mask(&model, &NoiseSchedule::default(), &a, &e, &e, &req).unwrap();
        assert!(m.relevance.data().iter().all(|&r| r == 0.0));
        assert!(m.is_empty());

        let (a, b, _) = quadrant_pair(8);
        let model = two_prompt_oracle(&a, &b, &table);
        let req = EditRequest {
            mask_threshold: 1.0,
            ..EditRequest::new(a.clone(), 1, 2)
        };
        let m = estimate_mask(&model, &NoiseSchedule::default(), &a, &table.embed(1), &table.embed(2), &req).unwrap();
        assert!(m.is_empty());
    }

    #[test]
    fn identical_prompt_ids_are_rejected() {
        let req = EditRequest::new(StateTensor::zeros(4, 4, 3), 3, 3);
        assert!(matches!(req.validate(), Err(Error::Invariant(_))));
        for bad in [0.0, 1.5, f64::NAN] {
            let r = EditRequest {
                encode_ratio: bad,
                ..EditRequest::new(StateTensor::zeros(4, 4, 3), 1, 2)
            };
            assert!(r.validate().is_err());
        }
    }

    proptest! {
        #[test]
        fn raising_threshold_never_grows_mask(seed in 0u64..200, lo in 0.0f64..1.0, hi in 0.0f64..1.0) {
            let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rel = StateTensor::randn(6, 5, 1, &mut rng).map(|v| (v * 0.3 + 0.5).clamp(0.0, 1.0));
            let a = EditMask::from_relevance(rel.clone(), lo);
            let b = EditMask::from_relevance(rel, hi);
            for (x, y) in a.mask.data().iter().zip(b.mask.data()) {
                prop_assert!(y <= x);
            }
        }
    }

    #[test]
    fn background_is_pinned_to_the_source_encoding() {
        let table = PromptTable::default();
        let (a, b, truth) = quadrant_pair(8);
        let model = two_prompt_oracle(&a, &b, &table);
        let schedule = NoiseSchedule::default();
        let grid = TimestepGrid::evenly_spaced(1000, 20).unwrap();
        let req = EditRequest {
            encode_ratio: 0.5,
            guidance: 1.0,
            ..EditRequest::new(a.clone(), 1, 2)
        };
        let (enc, dec) = masked_edit(&model, &schedule, &grid, &a, &table.embed(1), &table.embed(2), &truth, &req).unwrap();
        assert_eq!(enc.len(), 11);
        let hw = 64;
        for (e, d) in enc.iter().zip(&dec).take(10) {
            for i in 0..e.len() {
                if truth.data()[i % hw] < 0.5 {
                    assert!((e.data()[i] - d.data()[i]).abs() <= 1e-6);
                }
            }
        }
        // inside the mask the delta oracle lands on the target anchor
        for ch in 0..3 {
            for y in 0..4 {
                for x in 4..8 {
                    assert!((dec[0].get(ch, y, x) - b.get(ch, y, x)).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn empty_mask_at_smallest_ratio_is_a_near_no_op() {
        let table = PromptTable::default();
        let (a, b, _) = quadrant_pair(8);
        let model = two_prompt_oracle(&a, &b, &table);
        let schedule = NoiseSchedule::default();
        let grid = TimestepGrid::evenly_spaced(1000, 50).unwrap();
        let req = EditRequest {
            encode_ratio: 1e-3,
            ..EditRequest::new(a.clone(), 1, 2)
        };
        let empty = StateTensor::zeros(8, 8, 1);
        let (_, dec) = masked_edit(&model, &schedule, &grid, &a, &table.embed(1), &table.embed(2), &empty, &req).unwrap();
        assert_eq!(dec.len(), 2);
        assert_eq!(dec[0], a);
    }
}
