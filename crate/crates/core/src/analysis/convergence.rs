//! Convergence bound for quantized, encrypted DSGD on a smooth objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceInputs {
    /// `F(θ_0) − F(θ*)`.
    pub f0_gap: f64,
    pub rounds: u64,
    pub eta: f64,
    /// Per-sample gradient-variance bound: `E‖∇l − ∇F‖² ≤ σ²`.
    pub sigma: f64,
    pub batch_size: usize,
    pub n_clients: usize,
    pub dim: usize,
    pub clip: f64,
    pub bits: u32,
    /// Smoothness constant.
    pub nu: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceBound {
    /// `2[F(θ_0) − F(θ*)]/(Tη)`.
    pub optimization: f64,
    /// `σ²/(NB)`.
    pub variance: f64,
    /// Quantization term `dC²/(N·2^{2b})`.
    pub quantization: f64,
}

impl ConvergenceBound {
    /// Bound without quantization: the first two terms.
    pub fn vanilla(&self) -> f64 {
        self.optimization + self.variance
    }

    pub fn total(&self) -> f64 {
        self.vanilla() + self.quantization
    }
}

impl ConvergenceInputs {
    pub fn validate(&self) -> Result<()> {
        let positive = [("eta", self.eta), ("nu", self.nu), ("C", self.clip)];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Domain {
                    function: "convergence_bound",
                    detail: format!("{name} = {v} must be positive"),
                });
            }
        }
        if !(self.f0_gap.is_finite() && self.f0_gap >= 0.0)
            || !(self.sigma.is_finite() && self.sigma >= 0.0)
        {
            return Err(Error::Domain {
                function: "convergence_bound",
                detail: "F0 gap and sigma must be nonnegative".into(),
            });
        }
        if self.rounds == 0
            || self.batch_size == 0
            || self.n_clients == 0
            || self.dim == 0
            || self.bits == 0
        {
            return Err(Error::Domain {
                function: "convergence_bound",
                detail: "T, B, N, d and b must be positive".into(),
            });
        }
        if self.eta > 1.0 / self.nu {
            return Err(Error::Domain {
                function: "convergence_bound",
                detail: format!(
                    "step size eta = {} exceeds 1/nu = {}",
                    self.eta,
                    1.0 / self.nu
                ),
            });
        }
        Ok(())
    }
}

/// Upper bound on `(1/T) Σ_t E‖∇F(θ_t)‖²`.
pub fn convergence_bound(inputs: &ConvergenceInputs) -> Result<ConvergenceBound> {
    inputs.validate()?;
    let n = inputs.n_clients as f64;
    Ok(ConvergenceBound {
        optimization: 2.0 * inputs.f0_gap / (inputs.rounds as f64 * inputs.eta),
        variance: inputs.sigma * inputs.sigma / (n * inputs.batch_size as f64),
        quantization: inputs.dim as f64 * inputs.clip * inputs.clip
            / (n * 4f64.powi(inputs.bits as i32)),
    })
}
