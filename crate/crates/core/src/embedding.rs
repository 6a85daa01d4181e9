//! Lookup-table prompt embedder standing in for a text encoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Conditioning vector `C` for one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptEmbedding {
    pub prompt_id: u32,
    pub vector: Vec<f64>,
}

/// The unconditional ("null") embedding; optimised per step by null-text
/// inversion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullEmbedding {
    pub vector: Vec<f64>,
}

impl NullEmbedding {
    pub fn zeros(width: usize) -> Self {
        Self {
            vector: vec![0.0; width],
        }
    }
}

/// Deterministic map from prompt id to a standard-normal vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTable {
    pub width: usize,
    pub seed: u64,
}

impl Default for PromptTable {
    fn default() -> Self {
        Self {
            width: 8,
            seed: 0x5eed_c0de,
        }
    }
}

impl PromptTable {
    pub fn embed(&self, prompt_id: u32) -> PromptEmbedding {
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.seed ^ (prompt_id as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15),
        );
        PromptEmbedding {
            prompt_id,
            vector: (0..self.width).map(|_| StandardNormal.sample(&mut rng)).collect(),
        }
    }

    /// `tau("")`: the empty prompt maps to the zero vector.
    pub fn null(&self) -> NullEmbedding {
        NullEmbedding::zeros(self.width)
    }
}

pub(crate) fn check_width(vector: &[f64], width: usize) -> Result<()> {
    if vector.len() != width {
        return Err(Error::shape(
            format!("embedding width {width}"),
            format!("width {}", vector.len()),
        ));
    }
    if vector.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("embedding".into()));
    }
    Ok(())
}
