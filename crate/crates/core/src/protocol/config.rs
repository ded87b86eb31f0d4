//! Run configuration: JSON schema, defaults and validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lwe::LweParams;
use crate::trainer::{ModelKind, SgdConfig, SplitKind, SyntheticTask};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Quantize, encrypt without error, aggregate ciphertexts, decrypt exactly.
    #[default]
    Flag,
    /// Unquantized plaintext DSGD.
    Vanilla,
    /// Quantized plaintext aggregation; the reference FLAG must match.
    QuantizedPlain,
    /// Quantize and encrypt with an explicit rounded-Gaussian LWE error.
    LweBaseline,
}

impl Mode {
    pub fn encrypted(self) -> bool {
        matches!(self, Mode::Flag | Mode::LweBaseline)
    }

    pub fn quantized(self) -> bool {
        !matches!(self, Mode::Vanilla)
    }
}

/// How `C_t` evolves. Every client derives it from the broadcast alone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClipSchedule {
    /// `C_t = C0` for all rounds.
    Fixed,
    /// `C_{t+1} = max(floor, headroom·‖g_total,t‖∞)`, where `g_total` is the
    /// dequantized aggregate (a sum over clients). `C_0 = C0`.
    PreviousAggregate {
        #[serde(default = "default_headroom")]
        headroom: f64,
        #[serde(default = "default_floor")]
        floor: f64,
    },
    /// Fixed `C` from the quantization-aware overflow bound for i.i.d.
    /// `N(0, sigma_g²)` gradients at `delta_overflow`.
    OverflowBound { sigma_g: f64 },
}

fn default_headroom() -> f64 {
    2.0
}

fn default_floor() -> f64 {
    1e-6
}

impl Default for ClipSchedule {
    fn default() -> Self {
        ClipSchedule::PreviousAggregate {
            headroom: default_headroom(),
            floor: default_floor(),
        }
    }
}

/// Scale of the baseline's per-coordinate LWE error, in residue units.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineError {
    /// `σ_e = (q/2^b)·√12`.
    #[default]
    Printed,
    /// `σ_e = (q/2^b)/√12`, the standard deviation of a uniform step.
    Divided,
}

impl BaselineError {
    pub fn sigma(self, gamma_step: u64) -> f64 {
        let g = gamma_step as f64;
        match self {
            BaselineError::Printed => g * 12f64.sqrt(),
            BaselineError::Divided => g / 12f64.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Generated data dealt to the `N` clients.
    Synthetic {
        task: SyntheticTask,
        n_features: usize,
        samples_per_client: usize,
        #[serde(default)]
        test_samples: usize,
        #[serde(default)]
        noise: f64,
        #[serde(default)]
        split: SplitKind,
    },
    /// A CSV file split into `N` contiguous partitions. Relative paths are
    /// resolved against the config file's directory.
    Csv {
        path: PathBuf,
        label_column: String,
        #[serde(default)]
        feature_columns: Option<Vec<String>>,
        #[serde(default)]
        test_path: Option<PathBuf>,
    },
    /// Every client holds `½ Σ h_j (θ_j − θ*_j)²` with Gaussian gradient noise.
    Quadratic {
        curvature: Vec<f64>,
        optimum: Vec<f64>,
        sigma: f64,
        theta0: Vec<f64>,
    },
    /// Gradients are i.i.d. `N(0, sigma²)` per coordinate, independent of θ.
    GaussianGradients { dim: usize, sigma: f64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub matrix: u64,
    pub data: u64,
    /// One per client: batch sampling, key generation, baseline error.
    pub client_rng: Vec<u64>,
    /// One per client: quantizer dither.
    pub client_dither: Vec<u64>,
}

impl Seeds {
    /// Distinct seeds derived from `base` for `n_clients` clients.
    pub fn derived(base: u64, n_clients: usize) -> Self {
        let mix = |tag: u64, i: u64| {
            base.wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(tag << 32)
                .wrapping_add(i)
        };
        Self {
            matrix: mix(1, 0),
            data: mix(2, 0),
            client_rng: (0..n_clients as u64).map(|i| mix(3, i)).collect(),
            client_dither: (0..n_clients as u64).map(|i| mix(4, i)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub mode: Mode,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "default_q")]
    pub q: u64,
    pub b: u32,
    #[serde(rename = "N")]
    pub clients: usize,
    #[serde(rename = "T")]
    pub rounds: u32,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(rename = "C0", default = "default_c0")]
    pub c0: f64,
    #[serde(default)]
    pub clip_schedule: ClipSchedule,
    #[serde(default = "default_delta")]
    pub delta_overflow: f64,
    #[serde(default)]
    pub model: Option<ModelKind>,
    pub dataset: DatasetSpec,
    pub seeds: Seeds,
    #[serde(default)]
    pub baseline_error: BaselineError,
    /// Also report the security-condition warnings for `(n, m, q, b)`.
    #[serde(default)]
    pub check_security: bool,
    /// When false only client 0 decrypts and the others adopt its result;
    /// a simulation shortcut for large `N`.
    #[serde(default = "default_true")]
    pub decrypt_all_clients: bool,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_n() -> usize {
    256
}
fn default_m() -> usize {
    768
}
fn default_q() -> u64 {
    65536
}
fn default_eta() -> f64 {
    0.01
}
fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    0.0005
}
fn default_batch_size() -> usize {
    32
}
fn default_c0() -> f64 {
    1.0
}
fn default_delta() -> f64 {
    1e-6
}
fn default_true() -> bool {
    true
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| {
            let message = e.to_string();
            // serde reports unknown/missing fields as "... field `name` ..."
            let field = message
                .split('`')
                .nth(1)
                .map(str::to_string)
                .unwrap_or_else(|| "<document>".into());
            Error::Config { field, message }
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            eta: self.eta,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
        }
    }

    pub fn lwe_params(&self) -> Result<LweParams> {
        LweParams::new(self.n, self.m, self.q, self.b)
            .map_err(|e| Error::config("n/m/q/b", e.to_string()))
    }

    /// Makes dataset paths absolute relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        if let DatasetSpec::Csv {
            path, test_path, ..
        } = &mut self.dataset
        {
            if path.is_relative() {
                *path = base.join(&*path);
            }
            if let Some(t) = test_path {
                if t.is_relative() {
                    *t = base.join(&*t);
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.lwe_params()?;
        if self.clients < 2 {
            return Err(Error::config(
                "N",
                format!("{} clients; at least 2 are required", self.clients),
            ));
        }
        if self.rounds == 0 {
            return Err(Error::config("T", "must be at least 1"));
        }
        self.sgd().validate()?;
        if !(self.c0.is_finite() && self.c0 > 0.0) {
            return Err(Error::config("C0", format!("{} must be > 0", self.c0)));
        }
        if !(self.delta_overflow > 0.0 && self.delta_overflow < 1.0) {
            return Err(Error::config("delta_overflow", "must be in (0, 1)"));
        }
        match self.clip_schedule {
            ClipSchedule::Fixed => {}
            ClipSchedule::PreviousAggregate { headroom, floor } => {
                if !(headroom.is_finite() && headroom > 0.0) || !(floor.is_finite() && floor > 0.0)
                {
                    return Err(Error::config(
                        "clip_schedule",
                        "headroom and floor must be > 0",
                    ));
                }
            }
            ClipSchedule::OverflowBound { sigma_g } => {
                if !(sigma_g.is_finite() && sigma_g > 0.0) {
                    return Err(Error::config("clip_schedule.sigma_g", "must be > 0"));
                }
            }
        }
        for (field, list) in [
            ("seeds.client_rng", &self.seeds.client_rng),
            ("seeds.client_dither", &self.seeds.client_dither),
        ] {
            if list.len() != self.clients {
                return Err(Error::config(
                    field,
                    format!("{} seeds for {} clients", list.len(), self.clients),
                ));
            }
        }
        match &self.dataset {
            DatasetSpec::Synthetic { .. } | DatasetSpec::Csv { .. } => {
                if self.model.is_none() {
                    return Err(Error::config(
                        "model",
                        "required for synthetic and csv datasets",
                    ));
                }
            }
            DatasetSpec::Quadratic {
                curvature,
                optimum,
                sigma,
                theta0,
            } => {
                if curvature.is_empty()
                    || curvature.len() != optimum.len()
                    || curvature.len() != theta0.len()
                {
                    return Err(Error::config(
                        "dataset",
                        "curvature, optimum and theta0 must have equal nonzero length",
                    ));
                }
                if curvature.iter().any(|h| !(h.is_finite() && *h > 0.0))
                    || !(sigma.is_finite() && *sigma >= 0.0)
                {
                    return Err(Error::config(
                        "dataset",
                        "curvatures must be > 0 and sigma >= 0",
                    ));
                }
            }
            DatasetSpec::GaussianGradients { dim, sigma } => {
                if *dim == 0 || !(sigma.is_finite() && *sigma > 0.0) {
                    return Err(Error::config("dataset", "dim and sigma must be positive"));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> String {
        r#"{
            "b": 8, "N": 2, "T": 3,
            "model": {"kind": "logistic_regression"},
            "dataset": {"source": "synthetic", "task": "logistic", "n_features": 4, "samples_per_client": 20},
            "seeds": {"matrix": 1, "data": 2, "client_rng": [3, 4], "client_dither": [5, 6]}
        }"#
        .into()
    }

    #[test]
    fn defaults_fill_in() {
        let cfg = RunConfig::from_json(&minimal()).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.mode, Mode::Flag);
        assert_eq!((cfg.n, cfg.m, cfg.q), (256, 768, 65536));
        assert_eq!(
            (cfg.eta, cfg.momentum, cfg.weight_decay),
            (0.01, 0.9, 0.0005)
        );
        assert_eq!(cfg.c0, 1.0);
        let again = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn errors_name_the_field() {
        let cfg =
            RunConfig::from_json(&minimal().replace("\"T\": 3", "\"T\": 3, \"eta\": -1")).unwrap();
        match cfg.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "eta"),
            other => panic!("{other:?}"),
        }
        match RunConfig::from_json(&minimal().replace("\"T\": 3", "\"T\": 3, \"etaa\": 1")) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "etaa"),
            other => panic!("{other:?}"),
        }
        let cfg = RunConfig::from_json(&minimal().replace("[5, 6]", "[5]")).unwrap();
        assert!(
            matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "seeds.client_dither")
        );
        let cfg = RunConfig::from_json(&minimal().replace("\"N\": 2", "\"N\": 1")).unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "N"));
    }

    #[test]
    fn baseline_sigma() {
        assert!((BaselineError::Printed.sigma(1024) - 1024.0 * 12f64.sqrt()).abs() < 1e-9);
        assert!((BaselineError::Divided.sigma(1024) - 1024.0 / 12f64.sqrt()).abs() < 1e-9);
    }
}
