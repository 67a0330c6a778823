//! Seeded random projection of inputs onto the unit sphere.

use crate::error::{Result, XaasError};
use crate::rng::{seeded, standard_normal};

pub const DEFAULT_EMBED_DIM: usize = 32;
pub const DEFAULT_EMBED_SEED: u64 = 0x00E3_BEDD;

/// Added to the first coordinate when a projection has zero norm.
const ZERO_NORM_EPS: f64 = 1e-12;

pub type Embedding = Vec<f64>;

/// Gaussian projection `R^d -> R^D` followed by L2 normalization, so scaled
/// copies of an input share an embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedder {
    input_dim: usize,
    dim: usize,
    seed: u64,
    // Row-major dim x input_dim, entries N(0, 1/dim).
    proj: Vec<f64>,
}

impl Embedder {
    pub fn new(input_dim: usize, dim: usize, seed: u64) -> Self {
        assert!(input_dim > 0 && dim > 0, "embedder dimensions must be positive");
        let mut rng = seeded(seed);
        let s = 1.0 / (dim as f64).sqrt();
        let proj = (0..dim * input_dim)
            .map(|_| s * standard_normal(&mut rng))
            .collect();
        Self {
            input_dim,
            dim,
            seed,
            proj,
        }
    }

    pub fn with_defaults(input_dim: usize) -> Self {
        Self::new(input_dim, DEFAULT_EMBED_DIM, DEFAULT_EMBED_SEED)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn embed(&self, x: &[f64]) -> Result<Embedding> {
        if x.len() != self.input_dim {
            return Err(XaasError::DimensionMismatch {
                expected: self.input_dim,
                got: x.len(),
            });
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(XaasError::NonFinite(i));
        }
        let mut e: Vec<f64> = self
            .proj
            .chunks_exact(self.input_dim)
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect();
        let mut norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < ZERO_NORM_EPS {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[0] = ZERO_NORM_EPS;
            norm = ZERO_NORM_EPS;
        }
        e.iter_mut().for_each(|v| *v /= norm);
        Ok(e)
    }
}

/// Euclidean distance between two embeddings.
pub fn distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(XaasError::EmbeddingMismatch(a.len(), b.len()));
    }
    Ok(distance_unchecked(a, b))
}

#[inline]
pub(crate) fn distance_unchecked(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}
