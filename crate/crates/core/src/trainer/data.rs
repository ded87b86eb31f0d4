//! Datasets: seeded synthetic generators and CSV ingestion.

use std::fs::File;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Samples owned by one client (or a held-out test set).
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetPartition {
    pub owner: Option<u32>,
    /// Global sample ids; partitions of one generated pool are disjoint.
    pub sample_ids: Vec<usize>,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<f64>,
    pub feature_names: Vec<String>,
}

impl DatasetPartition {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    /// Splits into `parts` contiguous, near-equal, non-empty partitions.
    pub fn split(&self, parts: usize) -> Result<Vec<DatasetPartition>> {
        if parts == 0 || parts > self.len() {
            return Err(Error::Dataset(format!(
                "cannot split {} samples into {parts} non-empty partitions",
                self.len()
            )));
        }
        let base = self.len() / parts;
        let extra = self.len() % parts;
        let mut out = Vec::with_capacity(parts);
        let mut start = 0;
        for p in 0..parts {
            let end = start + base + usize::from(p < extra);
            out.push(DatasetPartition {
                owner: Some(p as u32),
                sample_ids: self.sample_ids[start..end].to_vec(),
                features: self.features[start..end].to_vec(),
                labels: self.labels[start..end].to_vec(),
                feature_names: self.feature_names.clone(),
            });
            start = end;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticTask {
    /// `y = wᵀx + noise·N(0,1)`
    Linear,
    /// `y = 1[wᵀx > 0]`, flipped with probability `noise`
    Logistic,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    #[default]
    Iid,
    /// Samples sorted by label before dealing contiguous blocks.
    LabelSkew,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub task: SyntheticTask,
    pub n_features: usize,
    pub clients: usize,
    pub samples_per_client: usize,
    #[serde(default)]
    pub test_samples: usize,
    /// Label noise std (linear) or flip probability (logistic).
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub split: SplitKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub partitions: Vec<DatasetPartition>,
    pub test: DatasetPartition,
    pub true_weights: Vec<f64>,
}

/// Deterministic generator: Gaussian features, a Gaussian ground-truth
/// weight vector, and labels per [`SyntheticTask`].
pub fn make_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticData> {
    if spec.clients == 0 {
        return Err(Error::Dataset("at least one partition is required".into()));
    }
    if spec.n_features == 0 || spec.samples_per_client == 0 {
        return Err(Error::Dataset(
            "n_features and samples_per_client must be positive".into(),
        ));
    }
    let noise_ok = match spec.task {
        SyntheticTask::Linear => spec.noise >= 0.0 && spec.noise.is_finite(),
        SyntheticTask::Logistic => (0.0..0.5).contains(&spec.noise),
    };
    if !noise_ok {
        return Err(Error::Dataset(format!(
            "noise = {} out of range for {:?}",
            spec.noise, spec.task
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let d = spec.n_features;
    let w: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let names: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    let total = spec.clients * spec.samples_per_client + spec.test_samples;

    let mut features = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    for _ in 0..total {
        let x: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let z: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum();
        let y = match spec.task {
            SyntheticTask::Linear => {
                let e: f64 = StandardNormal.sample(&mut rng);
                z + spec.noise * e
            }
            SyntheticTask::Logistic => {
                let clean = f64::from(z > 0.0);
                if rng.random::<f64>() < spec.noise {
                    1.0 - clean
                } else {
                    clean
                }
            }
        };
        features.push(x);
        labels.push(y);
    }

    let n_train = spec.clients * spec.samples_per_client;
    let test = DatasetPartition {
        owner: None,
        sample_ids: (n_train..total).collect(),
        features: features[n_train..].to_vec(),
        labels: labels[n_train..].to_vec(),
        feature_names: names.clone(),
    };

    let mut order: Vec<usize> = (0..n_train).collect();
    match spec.split {
        SplitKind::Iid => order.shuffle(&mut rng),
        SplitKind::LabelSkew => {
            order.sort_by(|&a, &b| labels[a].total_cmp(&labels[b]).then(a.cmp(&b)))
        }
    }
    let partitions = order
        .chunks(spec.samples_per_client)
        .enumerate()
        .map(|(owner, ids)| DatasetPartition {
            owner: Some(owner as u32),
            sample_ids: ids.to_vec(),
            features: ids.iter().map(|&i| features[i].clone()).collect(),
            labels: ids.iter().map(|&i| labels[i]).collect(),
            feature_names: names.clone(),
        })
        .collect();
    Ok(SyntheticData {
        partitions,
        test,
        true_weights: w,
    })
}

/// Names the label column; all other columns are features unless
/// `feature_columns` lists them explicitly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    pub label_column: String,
    #[serde(default)]
    pub feature_columns: Option<Vec<String>>,
}

/// Reads a headered, comma-separated file. Row numbers in errors are
/// 1-based file lines (the header is line 1).
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<DatasetPartition> {
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?
        .clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(Error::Dataset(format!("{}: empty file", path.display())));
    }
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Dataset(format!("column `{name}` not in header")))
    };
    let label_idx = column(&schema.label_column)?;
    let feature_names: Vec<String> = match &schema.feature_columns {
        Some(cols) => cols.clone(),
        None => headers
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != label_idx)
            .map(|(_, h)| h.to_string())
            .collect(),
    };
    let feature_idx = feature_names
        .iter()
        .map(|n| column(n))
        .collect::<Result<Vec<_>>>()?;
    if feature_idx.is_empty() {
        return Err(Error::Dataset("schema selects no feature columns".into()));
    }

    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut bad_rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| Error::Dataset(format!("line {line}: {e}")))?;
        if record.len() != headers.len() {
            return Err(Error::Dataset(format!(
                "line {line}: ragged row with {} fields, header has {}",
                record.len(),
                headers.len()
            )));
        }
        let parse = |idx: usize| {
            record[idx]
                .trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
        };
        let label = parse(label_idx);
        let row: Option<Vec<f64>> = feature_idx.iter().map(|&j| parse(j)).collect();
        match (label, row) {
            (Some(y), Some(x)) => {
                labels.push(y);
                features.push(x);
            }
            _ => bad_rows.push(line),
        }
    }
    if !bad_rows.is_empty() {
        return Err(Error::Dataset(format!(
            "non-numeric fields on lines {bad_rows:?}"
        )));
    }
    if labels.is_empty() {
        return Err(Error::Dataset(format!("{}: no data rows", path.display())));
    }
    Ok(DatasetPartition {
        owner: None,
        sample_ids: (0..labels.len()).collect(),
        features,
        labels,
        feature_names,
    })
}

/// Writes features then the label column `label`.
pub fn write_csv(partition: &DatasetPartition, path: &Path, label: &str) -> Result<()> {
    let io_err = |e: csv::Error| Error::Dataset(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io_err)?;
    let mut header = partition.feature_names.clone();
    header.push(label.to_string());
    w.write_record(&header).map_err(io_err)?;
    for (x, y) in partition.features.iter().zip(&partition.labels) {
        // `{}` on f64 prints the shortest string that parses back exactly.
        let row: Vec<String> = x
            .iter()
            .chain(std::iter::once(y))
            .map(|v| format!("{v}"))
            .collect();
        w.write_record(&row).map_err(io_err)?;
    }
    w.flush().map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}
