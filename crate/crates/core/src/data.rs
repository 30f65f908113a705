//! CSV datasets, splits and preprocessing.
//!
//! Features are stored feature-major (`D x N`, one sample per column) to
//! match the network's `x_0`. Labels are dense class indices assigned in
//! first-appearance order.

use std::collections::HashMap;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use thiserror::Error;

use crate::matrix::RealMatrix;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("csv error at line {line}: {message}")]
    Csv { line: u64, message: String },
    #[error("line {line}, column {column}: cannot parse `{value}` as a number")]
    Parse { line: u64, column: usize, value: String },
    #[error("line {line}: expected {expected} fields, found {found}")]
    Arity { line: u64, expected: usize, found: usize },
    #[error("line {line}, column {column}: non-finite value")]
    NonFinite { line: u64, column: usize },
    #[error("label column {column} is out of range for {fields} fields")]
    LabelColumn { column: usize, fields: usize },
    #[error("no data rows")]
    Empty,
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `D x N`
    pub features: RealMatrix,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub class_names: Vec<String>,
    pub feature_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn feature_count(&self) -> usize {
        self.features.rows()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let features = RealMatrix::from_fn(self.feature_count(), indices.len(), |r, c| self.features.get(r, indices[c]));
        Dataset {
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
            class_names: self.class_names.clone(),
            feature_names: self.feature_names.clone(),
        }
    }

    /// One-hot targets, `class_count x N`.
    pub fn targets(&self) -> RealMatrix {
        one_hot(&self.labels, self.class_count)
    }
}

/// Reads a comma-separated file. `label_column = None` takes the last field.
pub fn load_csv(path: impl AsRef<Path>, label_column: Option<usize>, has_header: bool) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    read_csv(file, label_column, has_header)
}

pub fn read_csv(reader: impl Read, label_column: Option<usize>, has_header: bool) -> Result<Dataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(has_header).flexible(true).trim(csv::Trim::All).from_reader(reader);
    let csv_err = |e: csv::Error| DataError::Csv {
        line: e.position().map_or(0, |p| p.line()),
        message: e.to_string(),
    };

    let header = if has_header { Some(rdr.headers().map_err(csv_err)?.clone()) } else { None };
    let mut width = header.as_ref().map(|h| h.len());
    let mut label_idx = None;
    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    let mut class_names: Vec<String> = Vec::new();
    let mut class_of: HashMap<String, usize> = HashMap::new();

    for record in rdr.records() {
        let record = record.map_err(csv_err)?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        let fields = *width.get_or_insert(record.len());
        if record.len() != fields {
            return Err(DataError::Arity { line, expected: fields, found: record.len() });
        }
        let li = *label_idx.get_or_insert(match label_column {
            Some(c) if c >= fields => return Err(DataError::LabelColumn { column: c, fields }),
            Some(c) => c,
            None => fields - 1,
        });
        if columns.is_empty() {
            columns = vec![Vec::new(); fields - 1];
        }
        let mut feature = 0;
        for (column, raw) in record.iter().enumerate() {
            if column == li {
                continue;
            }
            let v: f64 = raw.parse().map_err(|_| DataError::Parse { line, column, value: raw.to_string() })?;
            if !v.is_finite() {
                return Err(DataError::NonFinite { line, column });
            }
            columns[feature].push(v);
            feature += 1;
        }
        let name = &record[li];
        let next = class_names.len();
        let class = *class_of.entry(name.to_string()).or_insert_with(|| {
            class_names.push(name.to_string());
            next
        });
        labels.push(class);
    }

    if labels.is_empty() {
        return Err(DataError::Empty);
    }
    let n = labels.len();
    let d = columns.len();
    let features = RealMatrix::from_fn(d, n, |r, c| columns[r][c]);
    let feature_names = header.map(|h| {
        let li = label_idx.unwrap_or(h.len().saturating_sub(1));
        h.iter().enumerate().filter(|&(i, _)| i != li).map(|(_, s)| s.to_string()).collect()
    });
    Ok(Dataset { features, labels, class_count: class_names.len(), class_names, feature_names })
}

/// Per-feature training statistics (population standard deviation).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    pub fn fit(features: &RealMatrix) -> Self {
        let n = features.cols() as f64;
        let mean: Vec<f64> = (0..features.rows()).map(|r| features.row(r).iter().sum::<f64>() / n).collect();
        let std = (0..features.rows())
            .map(|r| (features.row(r).iter().map(|v| (v - mean[r]).powi(2)).sum::<f64>() / n).sqrt())
            .collect();
        FeatureStats { mean, std }
    }

    /// Zero-variance features map to 0.
    pub fn apply(&self, features: &RealMatrix) -> RealMatrix {
        RealMatrix::from_fn(features.rows(), features.cols(), |r, c| {
            if self.std[r] > 0.0 {
                (features.get(r, c) - self.mean[r]) / self.std[r]
            } else {
                0.0
            }
        })
    }
}

/// Standardizes both sets with statistics of `train` only.
pub fn standardize(train: &Dataset, test: &Dataset) -> Result<(Dataset, Dataset, FeatureStats), DataError> {
    if train.feature_count() != test.feature_count() {
        return Err(DataError::Invalid(format!(
            "train has {} features, test has {}",
            train.feature_count(),
            test.feature_count()
        )));
    }
    if train.is_empty() {
        return Err(DataError::Empty);
    }
    let stats = FeatureStats::fit(&train.features);
    let tr = Dataset { features: stats.apply(&train.features), ..train.clone() };
    let te = Dataset { features: stats.apply(&test.features), ..test.clone() };
    Ok((tr, te, stats))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
    pub seed: u64,
    pub test_fraction: f64,
}

/// Seeded shuffle, then the first `round(N * test_fraction)` samples go to
/// the test set.
pub fn split(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<Split, DataError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DataError::Invalid(format!("test fraction must lie in (0, 1), got {test_fraction}")));
    }
    let n = ds.len();
    let n_test = (n as f64 * test_fraction).round() as usize;
    if n_test == 0 || n_test == n {
        return Err(DataError::Invalid(format!("test fraction {test_fraction} leaves an empty side for {n} samples")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(Split { test: ds.select(&idx[..n_test]), train: ds.select(&idx[n_test..]), seed, test_fraction })
}

/// `class_count x N`, each column a unit vector.
pub fn one_hot(labels: &[usize], class_count: usize) -> RealMatrix {
    RealMatrix::from_fn(class_count, labels.len(), |r, c| if labels[c] == r { 1.0 } else { 0.0 })
}

/// `n` samples drawn without replacement.
pub fn subsample(ds: &Dataset, n: usize, seed: u64) -> Result<Dataset, DataError> {
    if n > ds.len() {
        return Err(DataError::Invalid(format!("cannot subsample {n} of {} samples", ds.len())));
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(n);
    Ok(ds.select(&idx))
}

/// Appends a constant-one feature row, acting as a bias input.
pub fn with_bias_row(ds: &Dataset) -> Dataset {
    let d = ds.feature_count();
    let features = RealMatrix::from_fn(d + 1, ds.len(), |r, c| if r < d { ds.features.get(r, c) } else { 1.0 });
    let feature_names = ds.feature_names.as_ref().map(|names| {
        let mut names = names.clone();
        names.push("bias".into());
        names
    });
    Dataset { features, feature_names, ..ds.clone() }
}

/// Binary problem shaped like HIGGS: `d` Gaussian features and a label from
/// a noisy nonlinear score.
pub fn synthetic_higgs_like(n: usize, d: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let mut features = RealMatrix::zeros(d, n);
    let mut labels = Vec::with_capacity(n);
    for c in 0..n {
        let x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let mut score: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt();
        if d >= 2 {
            score += 0.5 * x[0] * x[1];
        }
        score += 0.3 * rng.sample::<f64, _>(StandardNormal);
        for (r, v) in x.into_iter().enumerate() {
            features.set(r, c, v);
        }
        labels.push(usize::from(score > 0.0));
    }
    Dataset {
        features,
        labels,
        class_count: 2,
        class_names: vec!["0".into(), "1".into()],
        feature_names: None,
    }
}
