//! Mini-batch gradients and the momentum-SGD recursion.

use serde::{Deserialize, Serialize};

use super::data::DatasetPartition;
use super::model::Model;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub eta: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
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

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            eta: 0.01,
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            batch_size: default_batch_size(),
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(Error::config("eta", format!("{} must be > 0", self.eta)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(
                "momentum",
                format!("{} must be in [0, 1)", self.momentum),
            ));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config(
                "weight_decay",
                format!("{} must be >= 0", self.weight_decay),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        Ok(())
    }
}

/// `(1/B) Σ_{i∈batch} ∇l(θ; ξ_i) + weight_decay·θ`.
pub fn local_gradient(
    model: &Model,
    theta: &[f64],
    partition: &DatasetPartition,
    batch: &[usize],
    weight_decay: f64,
) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::TooFew {
            what: "batch samples",
            min: 1,
            actual: 0,
        });
    }
    if theta.len() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            actual: theta.len(),
        });
    }
    let mut g = vec![0.0; theta.len()];
    for &i in batch {
        let (x, y) = partition
            .features
            .get(i)
            .zip(partition.labels.get(i))
            .ok_or_else(|| {
                Error::Dataset(format!(
                    "batch index {i} out of range for {} samples",
                    partition.len()
                ))
            })?;
        if x.len() != model.n_features() {
            return Err(Error::DimensionMismatch {
                expected: model.n_features(),
                actual: x.len(),
            });
        }
        model.add_sample_gradient(theta, x, *y, &mut g);
    }
    let scale = 1.0 / batch.len() as f64;
    for (gj, tj) in g.iter_mut().zip(theta) {
        *gj = *gj * scale + weight_decay * tj;
    }
    if let Some(j) = g.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(j));
    }
    Ok(g)
}

/// Mean data loss over the partition plus `½·weight_decay·‖θ‖²`.
pub fn partition_loss(
    model: &Model,
    theta: &[f64],
    partition: &DatasetPartition,
    weight_decay: f64,
) -> f64 {
    let data: f64 = partition
        .features
        .iter()
        .zip(&partition.labels)
        .map(|(x, &y)| model.sample_loss(theta, x, y))
        .sum::<f64>()
        / partition.len().max(1) as f64;
    data + 0.5 * weight_decay * theta.iter().map(|t| t * t).sum::<f64>()
}

/// Fraction of samples whose thresholded prediction matches the label.
/// `None` for regression models.
pub fn accuracy(model: &Model, theta: &[f64], partition: &DatasetPartition) -> Option<f64> {
    if !model.kind().is_classifier() || partition.is_empty() {
        return None;
    }
    let hits = partition
        .features
        .iter()
        .zip(&partition.labels)
        .filter(|(x, &y)| (model.predict(theta, x) >= 0.5) == (y >= 0.5))
        .count();
    Some(hits as f64 / partition.len() as f64)
}

/// Classical momentum: `v ← μ·v + g`; the returned direction is the new `v`.
pub fn momentum_step(velocity: &mut [f64], g: &[f64], momentum: f64) -> Vec<f64> {
    debug_assert_eq!(velocity.len(), g.len());
    for (v, &gj) in velocity.iter_mut().zip(g) {
        *v = momentum * *v + gj;
    }
    velocity.to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::data::{make_synthetic, SplitKind, SyntheticSpec, SyntheticTask};
    use crate::trainer::model::ModelKind;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn partition(xs: Vec<Vec<f64>>, ys: Vec<f64>) -> DatasetPartition {
        DatasetPartition {
            owner: Some(0),
            sample_ids: (0..ys.len()).collect(),
            feature_names: (0..xs[0].len()).map(|j| format!("x{j}")).collect(),
            features: xs,
            labels: ys,
        }
    }

    #[test]
    fn config_validation() {
        assert!(SgdConfig::default().validate().is_ok());
        let bad = [
            SgdConfig {
                eta: 0.0,
                ..Default::default()
            },
            SgdConfig {
                momentum: 1.0,
                ..Default::default()
            },
            SgdConfig {
                weight_decay: -1.0,
                ..Default::default()
            },
            SgdConfig {
                batch_size: 0,
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::Config { .. })));
        }
    }

    #[test]
    fn single_sample_closed_form_with_decay() {
        let m = Model::zeros(ModelKind::LinearRegression, 2).unwrap();
        let p = partition(vec![vec![1.0, -2.0]], vec![0.5]);
        let theta = [0.3, 0.1];
        let g = local_gradient(&m, &theta, &p, &[0], 0.1).unwrap();
        let r = 0.3 - 0.2 - 0.5;
        assert!((g[0] - (r * 1.0 + 0.03)).abs() < 1e-15);
        assert!((g[1] - (r * -2.0 + 0.01)).abs() < 1e-15);
    }

    #[test]
    fn empty_batch_and_bad_index() {
        let m = Model::zeros(ModelKind::LinearRegression, 1).unwrap();
        let p = partition(vec![vec![1.0]], vec![0.0]);
        assert!(local_gradient(&m, &[0.0], &p, &[], 0.0).is_err());
        assert!(local_gradient(&m, &[0.0], &p, &[3], 0.0).is_err());
    }

    /// Normal equations solved by Gaussian elimination.
    fn least_squares(p: &DatasetPartition) -> Vec<f64> {
        let d = p.n_features();
        let mut a = vec![vec![0.0; d + 1]; d];
        for (x, &y) in p.features.iter().zip(&p.labels) {
            for i in 0..d {
                for j in 0..d {
                    a[i][j] += x[i] * x[j];
                }
                a[i][d] += x[i] * y;
            }
        }
        for c in 0..d {
            let pivot = (c..d)
                .max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))
                .unwrap();
            a.swap(c, pivot);
            for r in 0..d {
                if r != c {
                    let f = a[r][c] / a[c][c];
                    for k in c..=d {
                        a[r][k] -= f * a[c][k];
                    }
                }
            }
        }
        (0..d).map(|i| a[i][d] / a[i][i]).collect()
    }

    #[test]
    fn gradient_vanishes_at_least_squares_optimum() {
        let spec = SyntheticSpec {
            task: SyntheticTask::Linear,
            n_features: 6,
            clients: 1,
            samples_per_client: 200,
            test_samples: 0,
            noise: 0.5,
            split: SplitKind::Iid,
        };
        let p = &make_synthetic(&spec, 9).unwrap().partitions[0];
        let theta = least_squares(p);
        let m = Model::zeros(ModelKind::LinearRegression, 6).unwrap();
        let all: Vec<usize> = (0..p.len()).collect();
        let g = local_gradient(&m, &theta, p, &all, 0.0).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-10), "{g:?}");
    }

    #[test]
    fn mlp_batch_gradient_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let xs: Vec<Vec<f64>> = (0..12)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let ys: Vec<f64> = (0..12).map(|i| ((i * 7) % 2) as f64).collect();
        let p = partition(xs, ys);
        let m = Model::initialized(ModelKind::Mlp { hidden: vec![4] }, 3, &mut rng).unwrap();
        let theta = m.params().to_vec();
        let batch = [0, 3, 4, 7, 11];
        let wd = 0.01;
        let g = local_gradient(&m, &theta, &p, &batch, wd).unwrap();
        let h = 1e-6;
        let batch_loss = |t: &[f64]| {
            batch
                .iter()
                .map(|&i| m.sample_loss(t, &p.features[i], p.labels[i]))
                .sum::<f64>()
                / batch.len() as f64
                + 0.5 * wd * t.iter().map(|v| v * v).sum::<f64>()
        };
        for j in 0..theta.len() {
            let mut plus = theta.clone();
            let mut minus = theta.clone();
            plus[j] += h;
            minus[j] -= h;
            let fd = (batch_loss(&plus) - batch_loss(&minus)) / (2.0 * h);
            assert!(
                (fd - g[j]).abs() < 1e-5 * g[j].abs().max(1.0),
                "coordinate {j}"
            );
        }
    }

    #[test]
    fn full_batch_gd_decreases_linear_loss() {
        let spec = SyntheticSpec {
            task: SyntheticTask::Linear,
            n_features: 3,
            clients: 1,
            samples_per_client: 50,
            test_samples: 0,
            noise: 0.2,
            split: SplitKind::Iid,
        };
        let p = &make_synthetic(&spec, 4).unwrap().partitions[0];
        // Hessian (1/n) XᵀX; its largest eigenvalue by power iteration.
        let n = p.len() as f64;
        let hess = |v: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; 3];
            for x in &p.features {
                let s: f64 = x.iter().zip(v).map(|(a, b)| a * b).sum();
                for j in 0..3 {
                    out[j] += s * x[j] / n;
                }
            }
            out
        };
        let mut v = vec![1.0, 1.0, 1.0];
        let mut nu = 0.0;
        for _ in 0..200 {
            let w = hess(&v);
            nu = w.iter().map(|a| a * a).sum::<f64>().sqrt();
            v = w.iter().map(|a| a / nu).collect();
        }
        let m = Model::zeros(ModelKind::LinearRegression, 3).unwrap();
        let eta = 0.9 / nu;
        let all: Vec<usize> = (0..p.len()).collect();
        let mut theta = vec![0.0; 3];
        let mut prev = partition_loss(&m, &theta, p, 0.0);
        for _ in 0..100 {
            let g = local_gradient(&m, &theta, p, &all, 0.0).unwrap();
            for (t, gj) in theta.iter_mut().zip(&g) {
                *t -= eta * gj;
            }
            let loss = partition_loss(&m, &theta, p, 0.0);
            assert!(loss <= prev + 1e-15, "{loss} > {prev}");
            prev = loss;
        }
    }

    #[test]
    fn momentum_examples() {
        let mut v = vec![0.0, 0.0];
        assert_eq!(momentum_step(&mut v, &[1.0, 0.0], 0.5), vec![1.0, 0.0]);
        assert_eq!(momentum_step(&mut v, &[0.0, 1.0], 0.5), vec![0.5, 1.0]);

        let mut v = vec![0.0];
        assert_eq!(momentum_step(&mut v, &[3.0], 0.0), vec![3.0]);
        assert_eq!(momentum_step(&mut v, &[-2.0], 0.0), vec![-2.0]);

        let mut v = vec![0.0];
        let mut prev_gap = f64::INFINITY;
        for _ in 0..200 {
            let dir = momentum_step(&mut v, &[1.0], 0.9);
            let gap = 10.0 - dir[0];
            assert!(gap > 0.0 && gap < prev_gap);
            prev_gap = gap;
        }
        assert!(prev_gap < 1e-8);
    }

    #[test]
    fn separable_logistic_reaches_high_accuracy() {
        let spec = SyntheticSpec {
            task: SyntheticTask::Logistic,
            n_features: 5,
            clients: 4,
            samples_per_client: 100,
            test_samples: 0,
            noise: 0.0,
            split: SplitKind::Iid,
        };
        let data = make_synthetic(&spec, 5).unwrap();
        let m = Model::zeros(ModelKind::LogisticRegression, 5).unwrap();
        let mut theta = vec![0.0; 5];
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        for _ in 0..500 {
            let mut total = vec![0.0; 5];
            for p in &data.partitions {
                let batch: Vec<usize> = rand::seq::index::sample(&mut rng, p.len(), 32).into_vec();
                let g = local_gradient(&m, &theta, p, &batch, 0.0).unwrap();
                for (t, gj) in total.iter_mut().zip(&g) {
                    *t += gj;
                }
            }
            for (t, gj) in theta.iter_mut().zip(&total) {
                *t -= 5.0 / 4.0 * gj;
            }
        }
        let mut hits = 0.0;
        for p in &data.partitions {
            hits += accuracy(&m, &theta, p).unwrap() * p.len() as f64;
        }
        let acc = hits / 400.0;
        assert!(acc >= 0.99, "train accuracy {acc}");
    }
}
