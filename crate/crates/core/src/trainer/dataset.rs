//! Procedural shape scenes rendered independently at every stage resolution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::StateTensor;

pub const NUM_SHAPES: usize = 4;
pub const NUM_COLOR_PAIRS: usize = 4;
pub const MAX_CLASSES: usize = NUM_SHAPES * NUM_COLOR_PAIRS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; NUM_SHAPES] = [
        ShapeKind::Circle,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Cross,
    ];
}

/// (foreground, background) RGB in display range.
const COLOR_PAIRS: [([f64; 3], [f64; 3]); NUM_COLOR_PAIRS] = [
    ([0.90, 0.20, 0.20], [0.10, 0.10, 0.35]),
    ([0.20, 0.85, 0.30], [0.35, 0.10, 0.15]),
    ([0.20, 0.40, 0.95], [0.85, 0.80, 0.55]),
    ([0.95, 0.85, 0.20], [0.15, 0.30, 0.20]),
];

/// Class id `k` is shape `k % 4` in colour pair `k / 4`.
pub fn class_of(shape: ShapeKind, color_pair: usize) -> u32 {
    (color_pair * NUM_SHAPES + shape as usize) as u32
}

pub fn shape_of(class: u32) -> ShapeKind {
    ShapeKind::ALL[class as usize % NUM_SHAPES]
}

/// Continuous scene description in unit coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub shape: ShapeKind,
    pub color_pair: usize,
    pub cx: f64,
    pub cy: f64,
    pub half_size: f64,
}

impl Scene {
    pub fn for_class<R: Rng + ?Sized>(class: u32, rng: &mut R) -> Self {
        Self {
            shape: shape_of(class),
            color_pair: class as usize / NUM_SHAPES,
            cx: 0.5 + rng.gen_range(-0.06..0.06),
            cy: 0.5 + rng.gen_range(-0.06..0.06),
            half_size: rng.gen_range(0.3..0.36),
        }
    }

    pub fn class(&self) -> u32 {
        class_of(self.shape, self.color_pair)
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        let (dx, dy, s) = (u - self.cx, v - self.cy, self.half_size);
        match self.shape {
            ShapeKind::Circle => dx * dx + dy * dy <= s * s,
            ShapeKind::Square => dx.abs() <= s * 0.9 && dy.abs() <= s * 0.9,
            // apex up
            ShapeKind::Triangle => dy.abs() <= s && dx.abs() <= 0.5 * (dy + s),
            ShapeKind::Cross => {
                let arm = s * 0.38;
                (dx.abs() <= arm && dy.abs() <= s) || (dy.abs() <= arm && dx.abs() <= s)
            }
        }
    }

    /// Anti-aliased rendering by 4x4 supersampling per pixel.
    pub fn render(&self, res: usize) -> StateTensor {
        const SS: usize = 4;
        let (fg, bg) = COLOR_PAIRS[self.color_pair];
        let mut img = StateTensor::zeros(res, res, 3);
        let step = 1.0 / (res * SS) as f64;
        for y in 0..res {
            for x in 0..res {
                let mut hits = 0usize;
                for sy in 0..SS {
                    for sx in 0..SS {
                        let u = (x * SS + sx) as f64 * step + 0.5 * step;
                        let v = (y * SS + sy) as f64 * step + 0.5 * step;
                        hits += self.contains(u, v) as usize;
                    }
                }
                let cover = hits as f64 / (SS * SS) as f64;
                for c in 0..3 {
                    let display = cover * fg[c] + (1.0 - cover) * bg[c];
                    img.set(c, y, x, display * 2.0 - 1.0);
                }
            }
        }
        img
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSample {
    pub prompt_id: u32,
    pub scene: Scene,
    /// Renderings at the three stage resolutions, lowest first.
    pub image_pyramid: [StateTensor; 3],
}

impl ShapeSample {
    pub fn render(scene: Scene, resolutions: [usize; 3]) -> Self {
        Self {
            prompt_id: scene.class(),
            scene,
            image_pyramid: resolutions.map(|r| scene.render(r)),
        }
    }
}

/// `size` samples with classes assigned round-robin over `num_classes`.
pub fn generate_shapes(
    size: usize,
    num_classes: usize,
    resolutions: [usize; 3],
    seed: u64,
) -> Result<Vec<ShapeSample>> {
    if num_classes == 0 || num_classes > MAX_CLASSES {
        return Err(Error::InvalidRange(format!(
            "num_classes must be in 1..={MAX_CLASSES}, got {num_classes}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..size)
        .map(|i| ShapeSample::render(Scene::for_class((i % num_classes) as u32, &mut rng), resolutions))
        .collect())
}

/// Nearest class-mean classifier in pixel space.
#[derive(Debug, Clone)]
pub struct PrototypeClassifier {
    prototypes: Vec<StateTensor>,
}

impl PrototypeClassifier {
    /// Class means of `per_class` fresh renderings per class at `res`.
    pub fn build(num_classes: usize, res: usize, per_class: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prototypes = (0..num_classes as u32)
            .map(|k| {
                let mut acc = StateTensor::zeros(res, res, 3);
                for _ in 0..per_class {
                    acc.axpy(1.0 / per_class as f64, &Scene::for_class(k, &mut rng).render(res))
                        .expect("same resolution");
                }
                acc
            })
            .collect();
        Self { prototypes }
    }

    pub fn prototype(&self, class: u32) -> &StateTensor {
        &self.prototypes[class as usize]
    }

    pub fn classify(&self, img: &StateTensor) -> u32 {
        self.classify_among(img, None, 0..self.prototypes.len() as u32)
    }

    /// Nearest candidate, optionally restricted to pixels where `mask >= 0.5`
    /// (`mask` is one-channel at the image resolution).
    pub fn classify_among(
        &self,
        img: &StateTensor,
        mask: Option<&StateTensor>,
        candidates: impl IntoIterator<Item = u32>,
    ) -> u32 {
        let hw = img.height() * img.width();
        let dist = |k: u32| -> f64 {
            let p = &self.prototypes[k as usize];
            (0..img.len())
                .filter(|&i| mask.map_or(true, |m| m.data()[i % hw] >= 0.5))
                .map(|i| (img.data()[i] - p.data()[i]).powi(2))
                .sum()
        };
        candidates
            .into_iter()
            .map(|k| (k, dist(k)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(k, _)| k)
            .expect("at least one candidate")
    }
}
