//! Credit-card fraud data: CSV ingestion, train/test split, per-client
//! sampling and a synthetic stand-in for offline runs.
//!
//! Every row carries its original index so callers can audit that no client
//! ever trains on a holdout row.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::secure_agg::ClientId;
use crate::seed;

/// Rows each client draws per protocol iteration.
pub const DEFAULT_LOCAL_ROWS: usize = 1000;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("missing required column {0:?}")]
    MissingColumn(&'static str),

    #[error("no V-columns found in header")]
    NoFeatureColumns,

    #[error("row {row}: {reason}")]
    BadRow { row: usize, reason: String },

    #[error("training partition has {available} rows, need {needed}")]
    TooSmall { available: usize, needed: usize },

    #[error("invalid parameter: {0}")]
    Invalid(String),
}

/// Row-major feature matrix (intercept included) with `±1` labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    cols: usize,
    labels: Vec<f64>,
    row_ids: Vec<usize>,
    feature_names: Vec<String>,
}

impl Dataset {
    /// Builds a dataset from explicit rows; row ids are `0..len`.
    pub fn from_rows(rows: Vec<Vec<f64>>, labels: Vec<f64>) -> Result<Self, DataError> {
        if rows.len() != labels.len() {
            return Err(DataError::Invalid(format!(
                "{} rows but {} labels",
                rows.len(),
                labels.len()
            )));
        }
        let cols = rows.first().map_or(0, Vec::len);
        let mut features = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(DataError::BadRow {
                    row: i,
                    reason: format!("expected {cols} features, found {}", r.len()),
                });
            }
            features.extend_from_slice(r);
        }
        let feature_names = (0..cols).map(|c| format!("x{c}")).collect();
        let row_ids = (0..labels.len()).collect();
        Ok(Dataset {
            features,
            cols,
            labels,
            row_ids,
            feature_names,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Feature width, intercept included.
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn row_ids(&self) -> &[usize] {
        &self.row_ids
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.cols..(i + 1) * self.cols]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.features.chunks_exact(self.cols.max(1))
    }

    pub fn fraud_count(&self) -> usize {
        self.labels.iter().filter(|&&y| y > 0.0).count()
    }

    /// Copies the given local row positions into a new dataset.
    pub fn select(&self, positions: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(positions.len() * self.cols);
        let mut labels = Vec::with_capacity(positions.len());
        let mut row_ids = Vec::with_capacity(positions.len());
        for &p in positions {
            features.extend_from_slice(self.row(p));
            labels.push(self.labels[p]);
            row_ids.push(self.row_ids[p]);
        }
        Dataset {
            features,
            cols: self.cols,
            labels,
            row_ids,
            feature_names: self.feature_names.clone(),
        }
    }

    /// Rescales one column to zero mean and unit variance in place.
    pub fn standardize_column(&mut self, col: usize) {
        let n = self.len() as f64;
        if n == 0.0 {
            return;
        }
        let mean = self.rows().map(|r| r[col]).sum::<f64>() / n;
        let var = self.rows().map(|r| (r[col] - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt().max(f64::MIN_POSITIVE);
        let cols = self.cols;
        for r in self.features.chunks_exact_mut(cols) {
            r[col] = (r[col] - mean) / sd;
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Standardize the Amount column (off by default; the raw value is used).
    pub standardize_amount: bool,
}

/// Reads the fraud CSV. Keeps every `V*` column and `Amount`, drops `Time`,
/// appends an intercept column and maps `Class` 0/1 to −1/+1.
pub fn load_csv(path: &Path, options: LoadOptions) -> Result<Dataset, DataError> {
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_csv(file, options)
}

pub fn read_csv<R: std::io::Read>(reader: R, options: LoadOptions) -> Result<Dataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let position = |name: &str| headers.iter().position(|h| h.trim() == name);
    let class_col = position("Class").ok_or(DataError::MissingColumn("Class"))?;
    let amount_col = position("Amount").ok_or(DataError::MissingColumn("Amount"))?;
    let v_cols: Vec<usize> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| {
            let h = h.trim();
            h.len() > 1 && h.starts_with('V') && h[1..].chars().all(|c| c.is_ascii_digit())
        })
        .map(|(i, _)| i)
        .collect();
    if v_cols.is_empty() {
        return Err(DataError::NoFeatureColumns);
    }

    let mut feature_names: Vec<String> =
        v_cols.iter().map(|&i| headers[i].trim().to_string()).collect();
    feature_names.push("Amount".into());
    feature_names.push("Intercept".into());
    let cols = feature_names.len();

    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        // Header is line 1.
        let row = i + 2;
        let record = record?;
        let field = |c: usize| -> Result<f64, DataError> {
            let raw = record.get(c).ok_or_else(|| DataError::BadRow {
                row,
                reason: format!("missing field {}", &headers[c]),
            })?;
            let v: f64 = raw.trim().parse().map_err(|_| DataError::BadRow {
                row,
                reason: format!("cannot parse {:?} in {}", raw, &headers[c]),
            })?;
            if !v.is_finite() {
                return Err(DataError::BadRow {
                    row,
                    reason: format!("non-finite value in {}", &headers[c]),
                });
            }
            Ok(v)
        };
        for &c in &v_cols {
            features.push(field(c)?);
        }
        features.push(field(amount_col)?);
        features.push(1.0);
        let class = field(class_col)?;
        labels.push(match class as i64 {
            0 if class == 0.0 => -1.0,
            1 if class == 1.0 => 1.0,
            _ => {
                return Err(DataError::BadRow {
                    row,
                    reason: format!("Class must be 0 or 1, found {class}"),
                })
            }
        });
    }
    let row_ids = (0..labels.len()).collect();
    let mut ds = Dataset {
        features,
        cols,
        labels,
        row_ids,
        feature_names,
    };
    if options.standardize_amount {
        ds.standardize_column(cols - 2);
    }
    Ok(ds)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitConfig {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train_fraction: 0.75,
            seed: 0,
        }
    }
}

/// Seeded shuffle, then the first `⌊f·N⌋` rows train and the rest test.
pub fn split(ds: &Dataset, cfg: &SplitConfig) -> Result<(Dataset, Dataset), DataError> {
    if !(cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0) {
        return Err(DataError::Invalid(format!(
            "train fraction must be in (0, 1), got {}",
            cfg.train_fraction
        )));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut rng = seed::stream(cfg.seed, "split", 0, 0);
    order.shuffle(&mut rng);
    let cut = (cfg.train_fraction * ds.len() as f64).floor() as usize;
    let (train, test) = order.split_at(cut);
    Ok((ds.select(train), ds.select(test)))
}

/// One client's training slice for one protocol iteration.
#[derive(Debug, Clone)]
pub struct LocalDataset {
    pub client: ClientId,
    pub iteration: u32,
    pub data: Dataset,
}

/// Draws `rows` training rows without replacement, seeded by
/// `(run_seed, client, iteration)`. With `allow_small`, a partition smaller
/// than `rows` is returned whole.
pub fn sample_local(
    train: &Dataset,
    client: ClientId,
    iteration: u32,
    run_seed: u64,
    rows: usize,
    allow_small: bool,
) -> Result<LocalDataset, DataError> {
    let positions: Vec<usize> = if train.len() < rows {
        if !allow_small {
            return Err(DataError::TooSmall {
                available: train.len(),
                needed: rows,
            });
        }
        (0..train.len()).collect()
    } else {
        let mut rng = seed::stream(run_seed, "sample", client as u64, iteration as u64);
        index::sample(&mut rng, train.len(), rows).into_vec()
    };
    Ok(LocalDataset {
        client,
        iteration,
        data: train.select(&positions),
    })
}

/// True when the two datasets share no source row.
pub fn disjoint(a: &Dataset, b: &Dataset) -> bool {
    let ids: HashSet<usize> = a.row_ids().iter().copied().collect();
    b.row_ids().iter().all(|r| !ids.contains(r))
}

/// Parameters of the synthetic two-cluster dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub rows: usize,
    pub fraud_rate: f64,
    /// Feature count before the intercept column.
    pub features: usize,
    /// Per-coordinate mean shift of the fraud cluster.
    pub separation: f64,
    pub seed: u64,
}

/// Default per-coordinate shift of the fraud cluster. Regularized training
/// at `alpha_reg = 1` with 0.2% prevalence only flags fraud once the classes
/// sit this far apart.
pub const DEFAULT_SEPARATION: f64 = 6.0;

/// Feature count matching the real file (28 V-columns plus Amount).
pub const DEFAULT_SYNTH_FEATURES: usize = 29;

impl SynthConfig {
    pub fn new(rows: usize, fraud_rate: f64, seed: u64) -> Self {
        SynthConfig {
            rows,
            fraud_rate,
            features: DEFAULT_SYNTH_FEATURES,
            separation: DEFAULT_SEPARATION,
            seed,
        }
    }
}

/// Unit-variance Gaussian clusters: legitimate rows centred at 0, fraud rows
/// shifted by `separation` on every coordinate.
pub fn synth(cfg: &SynthConfig) -> Result<Dataset, DataError> {
    if !(cfg.fraud_rate > 0.0 && cfg.fraud_rate < 1.0) {
        return Err(DataError::Invalid(format!(
            "fraud rate must be in (0, 1), got {}",
            cfg.fraud_rate
        )));
    }
    if cfg.features == 0 {
        return Err(DataError::Invalid("need at least one feature".into()));
    }
    let mut rng = ChaCha20Rng::from_seed(seed::derive_seed(cfg.seed, "synth", 0, 0));
    let cols = cfg.features + 1;
    let mut features = Vec::with_capacity(cfg.rows * cols);
    let mut labels = Vec::with_capacity(cfg.rows);
    for _ in 0..cfg.rows {
        let fraud = rng.gen_bool(cfg.fraud_rate);
        let shift = if fraud { cfg.separation } else { 0.0 };
        for _ in 0..cfg.features {
            let z: f64 = rng.sample(StandardNormal);
            features.push(z + shift);
        }
        features.push(1.0);
        labels.push(if fraud { 1.0 } else { -1.0 });
    }
    let mut feature_names: Vec<String> = (1..=cfg.features).map(|i| format!("V{i}")).collect();
    feature_names.push("Intercept".into());
    Ok(Dataset {
        features,
        cols,
        labels,
        row_ids: (0..cfg.rows).collect(),
        feature_names,
    })
}
