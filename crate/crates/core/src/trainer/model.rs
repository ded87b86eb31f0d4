//! Small differentiable models over a flat parameter vector.
//!
//! Flattening order is layer-major; within a layer the weight matrix comes
//! first (row-major, `out x in`) followed by the bias vector. Linear and
//! logistic regression have a single weight row and no bias.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelKind {
    /// Squared loss `½(θᵀx - y)²`.
    LinearRegression,
    /// Binary cross-entropy on `σ(θᵀx)`, labels in `{0, 1}`.
    LogisticRegression,
    /// tanh hidden layers, scalar logit output, binary cross-entropy.
    Mlp { hidden: Vec<usize> },
}

impl ModelKind {
    pub fn is_classifier(&self) -> bool {
        !matches!(self, ModelKind::LinearRegression)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    kind: ModelKind,
    n_features: usize,
    params: Vec<f64>,
}

impl Model {
    /// All-zero parameters.
    pub fn zeros(kind: ModelKind, n_features: usize) -> Result<Self> {
        if n_features == 0 {
            return Err(Error::InvalidParams(
                "model needs at least one feature".into(),
            ));
        }
        if let ModelKind::Mlp { hidden } = &kind {
            if hidden.contains(&0) {
                return Err(Error::InvalidParams("hidden layer of width 0".into()));
            }
        }
        let dim = layer_sizes(&kind, n_features)
            .windows(2)
            .map(|w| parameter_count(&kind, w[0], w[1]))
            .sum();
        Ok(Self {
            kind,
            n_features,
            params: vec![0.0; dim],
        })
    }

    /// Zero for the regressions; scaled Gaussian (`1/sqrt(fan_in)`) weights
    /// and zero biases for the MLP, whose hidden units would otherwise stay
    /// symmetric.
    pub fn initialized<R: Rng + ?Sized>(
        kind: ModelKind,
        n_features: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut model = Self::zeros(kind, n_features)?;
        if matches!(model.kind, ModelKind::Mlp { .. }) {
            let sizes = layer_sizes(&model.kind, n_features);
            let mut offset = 0;
            for w in sizes.windows(2) {
                let (fan_in, fan_out) = (w[0], w[1]);
                let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).unwrap();
                for p in &mut model.params[offset..offset + fan_in * fan_out] {
                    *p = normal.sample(rng);
                }
                offset += fan_in * fan_out + fan_out;
            }
        }
        Ok(model)
    }

    pub fn kind(&self) -> &ModelKind {
        &self.kind
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn dim(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::DimensionMismatch {
                expected: self.params.len(),
                actual: params.len(),
            });
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    /// Per-sample loss at `theta` (data term only).
    pub fn sample_loss(&self, theta: &[f64], x: &[f64], y: f64) -> f64 {
        match &self.kind {
            ModelKind::LinearRegression => {
                let r = dot(theta, x) - y;
                0.5 * r * r
            }
            ModelKind::LogisticRegression => bce_with_logit(dot(theta, x), y),
            ModelKind::Mlp { .. } => {
                let acts = self.forward(theta, x);
                bce_with_logit(acts.last().unwrap()[0], y)
            }
        }
    }

    /// Adds the per-sample gradient at `theta` into `grad`.
    pub fn add_sample_gradient(&self, theta: &[f64], x: &[f64], y: f64, grad: &mut [f64]) {
        match &self.kind {
            ModelKind::LinearRegression => {
                let r = dot(theta, x) - y;
                axpy(r, x, grad);
            }
            ModelKind::LogisticRegression => {
                let r = sigmoid(dot(theta, x)) - y;
                axpy(r, x, grad);
            }
            ModelKind::Mlp { .. } => self.mlp_backward(theta, x, y, grad),
        }
    }

    /// Regression value, or the positive-class probability for classifiers.
    pub fn predict(&self, theta: &[f64], x: &[f64]) -> f64 {
        match &self.kind {
            ModelKind::LinearRegression => dot(theta, x),
            ModelKind::LogisticRegression => sigmoid(dot(theta, x)),
            ModelKind::Mlp { .. } => sigmoid(self.forward(theta, x).last().unwrap()[0]),
        }
    }

    fn forward(&self, theta: &[f64], x: &[f64]) -> Vec<Vec<f64>> {
        let sizes = layer_sizes(&self.kind, self.n_features);
        let last = sizes.len() - 2;
        let mut acts = vec![x.to_vec()];
        let mut offset = 0;
        for (l, w) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let weights = &theta[offset..offset + fan_in * fan_out];
            let bias = &theta[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            let input = acts.last().unwrap();
            let out: Vec<f64> = (0..fan_out)
                .map(|o| {
                    let z = dot(&weights[o * fan_in..(o + 1) * fan_in], input) + bias[o];
                    if l == last {
                        z
                    } else {
                        z.tanh()
                    }
                })
                .collect();
            acts.push(out);
            offset += fan_in * fan_out + fan_out;
        }
        acts
    }

    fn mlp_backward(&self, theta: &[f64], x: &[f64], y: f64, grad: &mut [f64]) {
        let sizes = layer_sizes(&self.kind, self.n_features);
        let acts = self.forward(theta, x);
        let mut offsets = Vec::with_capacity(sizes.len() - 1);
        let mut offset = 0;
        for w in sizes.windows(2) {
            offsets.push(offset);
            offset += w[0] * w[1] + w[1];
        }
        // dL/dz at the output logit
        let mut delta = vec![sigmoid(acts.last().unwrap()[0]) - y];
        for l in (0..sizes.len() - 1).rev() {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let off = offsets[l];
            let input = &acts[l];
            for o in 0..fan_out {
                let row = &mut grad[off + o * fan_in..off + (o + 1) * fan_in];
                axpy(delta[o], input, row);
                grad[off + fan_in * fan_out + o] += delta[o];
            }
            if l > 0 {
                let weights = &theta[off..off + fan_in * fan_out];
                delta = (0..fan_in)
                    .map(|i| {
                        let back: f64 = (0..fan_out)
                            .map(|o| weights[o * fan_in + i] * delta[o])
                            .sum();
                        let a = input[i];
                        back * (1.0 - a * a)
                    })
                    .collect();
            }
        }
    }
}

fn layer_sizes(kind: &ModelKind, n_features: usize) -> Vec<usize> {
    match kind {
        ModelKind::LinearRegression | ModelKind::LogisticRegression => vec![n_features, 1],
        ModelKind::Mlp { hidden } => {
            let mut sizes = vec![n_features];
            sizes.extend(hidden);
            sizes.push(1);
            sizes
        }
    }
}

fn parameter_count(kind: &ModelKind, fan_in: usize, fan_out: usize) -> usize {
    match kind {
        ModelKind::Mlp { .. } => fan_in * fan_out + fan_out,
        _ => fan_in * fan_out,
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z) - y z`, stable for large `|z|`.
fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p() - y * z
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn dimensions() {
        assert_eq!(
            Model::zeros(ModelKind::LinearRegression, 7).unwrap().dim(),
            7
        );
        let mlp = Model::zeros(ModelKind::Mlp { hidden: vec![5, 3] }, 4).unwrap();
        assert_eq!(mlp.dim(), (4 * 5 + 5) + (5 * 3 + 3) + (3 + 1));
        assert!(Model::zeros(ModelKind::Mlp { hidden: vec![0] }, 4).is_err());
        assert!(Model::zeros(ModelKind::LinearRegression, 0).is_err());
    }

    #[test]
    fn linear_sample_gradient_closed_form() {
        let m = Model::zeros(ModelKind::LinearRegression, 3).unwrap();
        let theta = [0.5, -1.0, 2.0];
        let x = [1.0, 2.0, 3.0];
        let y = 1.5;
        let mut g = vec![0.0; 3];
        m.add_sample_gradient(&theta, &x, y, &mut g);
        let r = 0.5 - 2.0 + 6.0 - 1.5;
        assert_eq!(g, vec![r * 1.0, r * 2.0, r * 3.0]);
    }

    fn finite_difference_check(model: &Model, theta: &[f64], xs: &[Vec<f64>], ys: &[f64]) {
        let h = 1e-6;
        let mut grad = vec![0.0; theta.len()];
        for (x, &y) in xs.iter().zip(ys) {
            model.add_sample_gradient(theta, x, y, &mut grad);
        }
        let n = xs.len() as f64;
        for j in 0..theta.len() {
            let mut plus = theta.to_vec();
            let mut minus = theta.to_vec();
            plus[j] += h;
            minus[j] -= h;
            let fd: f64 = xs
                .iter()
                .zip(ys)
                .map(|(x, &y)| {
                    (model.sample_loss(&plus, x, y) - model.sample_loss(&minus, x, y)) / (2.0 * h)
                })
                .sum::<f64>()
                / n;
            let analytic = grad[j] / n;
            let tol = 1e-5 * analytic.abs().max(1.0);
            assert!(
                (fd - analytic).abs() < tol,
                "coordinate {j}: fd {fd} vs analytic {analytic}"
            );
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let xs: Vec<Vec<f64>> = (0..16)
            .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let ys: Vec<f64> = (0..16).map(|i| (i % 2) as f64).collect();
        for kind in [
            ModelKind::LinearRegression,
            ModelKind::LogisticRegression,
            ModelKind::Mlp { hidden: vec![6, 3] },
        ] {
            let model = Model::initialized(kind, 4, &mut rng).unwrap();
            let theta: Vec<f64> = (0..model.dim())
                .map(|_| rng.random_range(-0.8..0.8))
                .collect();
            finite_difference_check(&model, &theta, &xs, &ys);
        }
    }

    #[test]
    fn logistic_loss_is_stable() {
        assert!((bce_with_logit(800.0, 1.0)).abs() < 1e-12);
        assert!((bce_with_logit(-800.0, 0.0)).abs() < 1e-12);
        assert!((bce_with_logit(0.0, 1.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(sigmoid(-1000.0), 0.0);
    }
}
