//! Closed-form calculators (overflow probability, clipping threshold,
//! communication factor, convergence bound) and their Monte Carlo checks.

pub mod comm;
pub mod convergence;
pub mod overflow;
pub mod special;

use serde::Serialize;

pub use comm::{comm_factor, ct_bits, plain_bits, table_factor, tau_measured};
pub use convergence::{convergence_bound, ConvergenceBound, ConvergenceInputs};
pub use overflow::{
    exact_overflow_probability, mc_overflow_estimate, min_clip_threshold,
    min_clip_threshold_quantized, overflow_probability, McEstimate, OverflowModel,
    OverflowProbability,
};
pub use special::{erfc, erfc_inv};

/// One analysis result as printed by the command-line tool.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub analysis: &'static str,
    pub inputs: serde_json::Value,
    pub formula_value: f64,
    pub mc_estimate: Option<f64>,
    pub stderr: Option<f64>,
    pub verdict: String,
    /// Analysis-specific values (thresholds, per-term breakdowns, ...).
    pub details: serde_json::Value,
}
