//! Per-client objectives `F_i` the simulator can query for stochastic and
//! full gradients.

use rand::seq::index;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::data::DatasetPartition;
use super::model::Model;
use super::sgd::{accuracy, local_gradient, partition_loss};
use crate::error::{Error, Result};

pub trait LocalObjective: Send + Sync {
    fn dim(&self) -> usize;

    /// One mini-batch gradient at `theta`, drawing randomness from `rng`.
    fn stochastic_gradient(&self, theta: &[f64], rng: &mut ChaCha20Rng) -> Result<Vec<f64>>;

    /// `F_i(θ)`.
    fn loss(&self, theta: &[f64]) -> f64;

    /// `∇F_i(θ)`.
    fn full_gradient(&self, theta: &[f64]) -> Vec<f64>;

    /// Classification accuracy on the client's data, if meaningful.
    fn accuracy(&self, _theta: &[f64]) -> Option<f64> {
        None
    }
}

/// A model trained on one data partition.
#[derive(Debug, Clone)]
pub struct ModelObjective {
    pub model: Model,
    pub partition: DatasetPartition,
    pub batch_size: usize,
    pub weight_decay: f64,
}

impl ModelObjective {
    pub fn new(
        model: Model,
        partition: DatasetPartition,
        batch_size: usize,
        weight_decay: f64,
    ) -> Result<Self> {
        if partition.is_empty() {
            return Err(Error::Dataset("client partition is empty".into()));
        }
        if partition.n_features() != model.n_features() {
            return Err(Error::DimensionMismatch {
                expected: model.n_features(),
                actual: partition.n_features(),
            });
        }
        if batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        Ok(Self {
            model,
            partition,
            batch_size,
            weight_decay,
        })
    }
}

impl LocalObjective for ModelObjective {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    /// Samples `min(B, |D_i|)` indices without replacement.
    fn stochastic_gradient(&self, theta: &[f64], rng: &mut ChaCha20Rng) -> Result<Vec<f64>> {
        let n = self.partition.len();
        let batch = index::sample(rng, n, self.batch_size.min(n)).into_vec();
        local_gradient(
            &self.model,
            theta,
            &self.partition,
            &batch,
            self.weight_decay,
        )
    }

    fn loss(&self, theta: &[f64]) -> f64 {
        partition_loss(&self.model, theta, &self.partition, self.weight_decay)
    }

    fn full_gradient(&self, theta: &[f64]) -> Vec<f64> {
        let all: Vec<usize> = (0..self.partition.len()).collect();
        local_gradient(&self.model, theta, &self.partition, &all, self.weight_decay)
            .unwrap_or_else(|_| vec![f64::NAN; theta.len()])
    }

    fn accuracy(&self, theta: &[f64]) -> Option<f64> {
        accuracy(&self.model, theta, &self.partition)
    }
}

/// `F(θ) = ½ Σ_j h_j (θ_j − θ*_j)²` with stochastic gradients
/// `∇F(θ) + ξ`, `ξ ~ N(0, σ²/(dB)·I)`, so that `E‖ξ‖² = σ²/B`.
/// Smoothness constant `ν = max_j h_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyQuadratic {
    pub curvature: Vec<f64>,
    pub optimum: Vec<f64>,
    pub sigma: f64,
    pub batch_size: usize,
}

impl NoisyQuadratic {
    pub fn new(
        curvature: Vec<f64>,
        optimum: Vec<f64>,
        sigma: f64,
        batch_size: usize,
    ) -> Result<Self> {
        if curvature.is_empty() || curvature.len() != optimum.len() {
            return Err(Error::DimensionMismatch {
                expected: curvature.len(),
                actual: optimum.len(),
            });
        }
        if curvature.iter().any(|&h| !(h.is_finite() && h > 0.0)) {
            return Err(Error::InvalidParams("curvatures must be positive".into()));
        }
        if !(sigma.is_finite() && sigma >= 0.0) || batch_size == 0 {
            return Err(Error::InvalidParams(
                "need sigma >= 0 and batch_size >= 1".into(),
            ));
        }
        Ok(Self {
            curvature,
            optimum,
            sigma,
            batch_size,
        })
    }

    pub fn smoothness(&self) -> f64 {
        self.curvature.iter().copied().fold(0.0, f64::max)
    }

    /// `F* = 0`.
    pub fn min_value(&self) -> f64 {
        0.0
    }
}

impl LocalObjective for NoisyQuadratic {
    fn dim(&self) -> usize {
        self.curvature.len()
    }

    fn stochastic_gradient(&self, theta: &[f64], rng: &mut ChaCha20Rng) -> Result<Vec<f64>> {
        let std = self.sigma / ((self.dim() * self.batch_size) as f64).sqrt();
        let mut g = self.full_gradient(theta);
        for gj in &mut g {
            let z: f64 = StandardNormal.sample(rng);
            *gj += std * z;
        }
        Ok(g)
    }

    fn loss(&self, theta: &[f64]) -> f64 {
        0.5 * self
            .curvature
            .iter()
            .zip(&self.optimum)
            .zip(theta)
            .map(|((h, o), t)| h * (t - o) * (t - o))
            .sum::<f64>()
    }

    fn full_gradient(&self, theta: &[f64]) -> Vec<f64> {
        self.curvature
            .iter()
            .zip(&self.optimum)
            .zip(theta)
            .map(|((h, o), t)| h * (t - o))
            .collect()
    }
}

/// Gradients drawn i.i.d. `N(0, σ_g²)` per coordinate regardless of `θ`.
/// Drives overflow experiments; loss is identically zero.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianGradient {
    pub dim: usize,
    pub sigma: f64,
}

impl LocalObjective for GaussianGradient {
    fn dim(&self) -> usize {
        self.dim
    }

    fn stochastic_gradient(&self, _theta: &[f64], rng: &mut ChaCha20Rng) -> Result<Vec<f64>> {
        let normal =
            Normal::new(0.0, self.sigma).map_err(|e| Error::InvalidParams(e.to_string()))?;
        Ok((0..self.dim).map(|_| normal.sample(rng)).collect())
    }

    fn loss(&self, _theta: &[f64]) -> f64 {
        0.0
    }

    fn full_gradient(&self, _theta: &[f64]) -> Vec<f64> {
        vec![0.0; self.dim]
    }
}
