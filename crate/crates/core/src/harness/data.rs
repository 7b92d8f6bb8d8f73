//! Agent populations: a seeded synthetic generator and a CSV loader. Both
//! standardize features to zero mean and unit variance per coordinate.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::losses::{LabeledSample, Sample};
use crate::numeric::RngStream;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("synthetic data needs d >= 1 and m >= 2 (got d = {d}, m = {m})")]
    TooSmall { d: usize, m: usize },
    #[error("{path}: column `{column}` not found")]
    MissingColumn { path: PathBuf, column: String },
    #[error("{path}: row {row}: {reason}")]
    BadRow {
        path: PathBuf,
        row: usize,
        reason: String,
    },
    #[error("{path}: no data rows")]
    Empty { path: PathBuf },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
}

/// Population of agents' original data points.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<LabeledSample>,
}

impl Dataset {
    pub fn m(&self) -> usize {
        self.samples.len()
    }

    pub fn d(&self) -> usize {
        self.samples.first().map_or(0, |s| s.features.len())
    }

    pub fn features(&self) -> Vec<Vec<f64>> {
        self.samples.iter().map(|s| s.features.clone()).collect()
    }

    pub fn as_samples(&self) -> Vec<Sample> {
        self.samples.iter().cloned().map(Sample::Labeled).collect()
    }

    pub fn label_counts(&self) -> (usize, usize) {
        let ones = self.samples.iter().filter(|s| s.label == 1).count();
        (self.m() - ones, ones)
    }
}

/// Centers each coordinate and scales it to unit (population) variance.
/// Constant columns are centered only.
pub fn standardize(rows: &mut [Vec<f64>]) {
    let Some(d) = rows.first().map(Vec::len) else {
        return;
    };
    let n = rows.len() as f64;
    for j in 0..d {
        let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
        let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        for r in rows.iter_mut() {
            r[j] -= mean;
            if sd > 0.0 {
                r[j] /= sd;
            }
        }
    }
}

/// Distance between the two class means, per coordinate, before
/// standardization.
const CLASS_SEPARATION: f64 = 1.5;

/// Two unit-covariance Gaussian classes centred at `±CLASS_SEPARATION/2` on
/// every coordinate, with label counts differing by at most one.
pub fn generate_synthetic(d: usize, m: usize, seed: u64) -> Result<Dataset, DataError> {
    if d < 1 || m < 2 {
        return Err(DataError::TooSmall { d, m });
    }
    let mut rng = RngStream::new(seed);
    let mut labels: Vec<u8> = (0..m).map(|i| (i % 2) as u8).collect();
    labels.shuffle(&mut rng);
    let mut rows: Vec<Vec<f64>> = labels
        .iter()
        .map(|&y| {
            let centre = if y == 1 { 0.5 } else { -0.5 } * CLASS_SEPARATION;
            (0..d)
                .map(|_| centre + rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    standardize(&mut rows);
    let samples = rows
        .into_iter()
        .zip(labels)
        .map(|(x, y)| LabeledSample::new(x, y))
        .collect();
    Ok(Dataset { samples })
}

fn parse_label(raw: &str) -> Option<u8> {
    let v: f64 = raw.trim().parse().ok()?;
    if v == 0.0 {
        Some(0)
    } else if v == 1.0 {
        Some(1)
    } else {
        None
    }
}

/// Reads `feature_columns` and `label_column` from a headed CSV file.
/// Row numbers in errors count data rows from 1.
pub fn load_csv(
    path: &Path,
    feature_columns: &[String],
    label_column: &str,
) -> Result<Dataset, DataError> {
    let csv_err = |source| DataError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers = reader.headers().map_err(csv_err)?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| DataError::MissingColumn {
                path: path.to_path_buf(),
                column: name.to_string(),
            })
    };
    let label_idx = find(label_column)?;
    let feature_idx = feature_columns
        .iter()
        .map(|c| find(c))
        .collect::<Result<Vec<_>, _>>()?;

    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let bad = |reason: String| DataError::BadRow {
            path: path.to_path_buf(),
            row,
            reason,
        };
        let record = record.map_err(|e| bad(e.to_string()))?;
        let field = |idx: usize| record.get(idx).unwrap_or("");
        let raw_label = field(label_idx);
        let y = parse_label(raw_label)
            .ok_or_else(|| bad(format!("label `{raw_label}` is not 0 or 1")))?;
        let x = feature_idx
            .iter()
            .zip(feature_columns)
            .map(|(&idx, name)| {
                let raw = field(idx);
                match raw.trim().parse::<f64>() {
                    Ok(v) if v.is_finite() => Ok(v),
                    _ => Err(bad(format!("column `{name}`: cannot parse `{raw}`"))),
                }
            })
            .collect::<Result<Vec<f64>, _>>()?;
        rows.push(x);
        labels.push(y);
    }
    if rows.is_empty() {
        return Err(DataError::Empty {
            path: path.to_path_buf(),
        });
    }
    standardize(&mut rows);
    let samples = rows
        .into_iter()
        .zip(labels)
        .map(|(x, y)| LabeledSample::new(x, y))
        .collect();
    Ok(Dataset { samples })
}

/// Writes `dataset` with columns `x0..x{d-1},y`, floats at 17 significant
/// digits.
pub fn write_csv(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    let csv_err = |source| DataError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header: Vec<String> = (0..dataset.d()).map(|j| format!("x{j}")).collect();
    header.push("y".into());
    w.write_record(&header).map_err(csv_err)?;
    for s in &dataset.samples {
        let mut rec: Vec<String> = s.features.iter().map(|v| format!("{v:.16e}")).collect();
        rec.push(s.label.to_string());
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| csv_err(e.into()))?;
    Ok(())
}
