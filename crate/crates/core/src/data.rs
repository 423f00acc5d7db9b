//! Tabular regression data: CSV loading, splits, standardization and the
//! input Gram matrix.

use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, DkmError, Result};
use crate::gram::GramMatrix;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub feature_names: Vec<String>,
    pub target_names: Vec<String>,
    pub feature_means: Vec<f64>,
    pub feature_stds: Vec<f64>,
    pub target_means: Vec<f64>,
    pub target_stds: Vec<f64>,
}

impl Dataset {
    /// Wraps raw arrays with identity standardization statistics.
    pub fn from_arrays(name: &str, x: DMatrix<f64>, y: DMatrix<f64>) -> Result<Self> {
        if x.nrows() != y.nrows() {
            return Err(invalid(format!(
                "{} input rows but {} target rows",
                x.nrows(),
                y.nrows()
            )));
        }
        if x.nrows() == 0 || y.ncols() == 0 {
            return Err(invalid("dataset must have rows and at least one target"));
        }
        let feature_names = (0..x.ncols()).map(|j| format!("x{j}")).collect();
        let target_names = (0..y.ncols()).map(|j| format!("y{j}")).collect();
        Ok(Dataset {
            name: name.to_string(),
            feature_means: vec![0.0; x.ncols()],
            feature_stds: vec![1.0; x.ncols()],
            target_means: vec![0.0; y.ncols()],
            target_stds: vec![1.0; y.ncols()],
            x,
            y,
            feature_names,
            target_names,
        })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    /// Rows in the given order, keeping the statistics.
    pub fn select(&self, rows: &[usize]) -> Dataset {
        Dataset {
            x: select_rows(&self.x, rows),
            y: select_rows(&self.y, rows),
            ..self.clone()
        }
    }

    /// Maps standardized targets back to original units.
    pub fn destandardize_y(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(y.nrows(), y.ncols(), |i, j| {
            y[(i, j)] * self.target_stds[j] + self.target_means[j]
        })
    }

    /// Applies this dataset's target statistics to raw targets.
    pub fn standardize_y(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(y.nrows(), y.ncols(), |i, j| {
            (y[(i, j)] - self.target_means[j]) / self.target_stds[j]
        })
    }

    /// RMSE in original units between standardized predictions and this
    /// dataset's (standardized) targets.
    pub fn rmse_original_units(&self, pred: &DMatrix<f64>) -> Result<f64> {
        if pred.shape() != self.y.shape() {
            return Err(invalid(format!(
                "prediction shape {:?} does not match targets {:?}",
                pred.shape(),
                self.y.shape()
            )));
        }
        Ok(rmse(
            &self.destandardize_y(pred),
            &self.destandardize_y(&self.y),
        ))
    }
}

pub fn rmse(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    ((a - b).norm_squared() / a.len() as f64).sqrt()
}

pub(crate) fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

/// Loads a numeric CSV with a header row. `targets` names the target columns;
/// every other column is an input. Row and column numbers in errors are
/// 1-based and count the header as row 1.
pub fn load_csv(path: impl AsRef<Path>, targets: &[String]) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_csv(file, &name, targets)
}

/// Dataset manifest entry. With no `targets` the last column is the target.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSource {
    pub name: String,
    pub path: std::path::PathBuf,
    #[serde(default)]
    pub targets: Vec<String>,
}

impl DatasetSource {
    pub fn load(&self) -> Result<Dataset> {
        let targets = if self.targets.is_empty() {
            let mut rdr = csv::ReaderBuilder::new()
                .trim(csv::Trim::All)
                .from_path(&self.path)
                .map_err(|e| csv_error(e, 1))?;
            let last = rdr
                .headers()
                .map_err(|e| csv_error(e, 1))?
                .iter()
                .next_back()
                .map(str::to_string);
            vec![last.ok_or_else(|| invalid(format!("{}: empty header", self.path.display())))?]
        } else {
            self.targets.clone()
        };
        let mut ds = load_csv(&self.path, &targets)?;
        ds.name = self.name.clone();
        Ok(ds)
    }
}

pub fn read_csv<R: std::io::Read>(reader: R, name: &str, targets: &[String]) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| csv_error(e, 1))?
        .iter()
        .map(str::to_string)
        .collect();
    if targets.is_empty() {
        return Err(invalid("at least one target column is required"));
    }
    let mut target_idx = Vec::with_capacity(targets.len());
    for t in targets {
        let idx = header
            .iter()
            .position(|h| h == t)
            .ok_or_else(|| invalid(format!("target column {t:?} not in header {header:?}")))?;
        target_idx.push(idx);
    }
    let feature_idx: Vec<usize> = (0..header.len())
        .filter(|i| !target_idx.contains(i))
        .collect();

    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let row = r + 2;
        let rec = rec.map_err(|e| csv_error(e, row))?;
        let mut vals = Vec::with_capacity(rec.len());
        for (c, cell) in rec.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| DkmError::Parse {
                row,
                column: c + 1,
                message: format!("not a number: {cell:?}"),
            })?;
            if !v.is_finite() {
                return Err(DkmError::Parse {
                    row,
                    column: c + 1,
                    message: format!("non-finite value {cell:?}"),
                });
            }
            vals.push(v);
        }
        rows.push(vals);
    }
    if rows.is_empty() {
        return Err(invalid(format!("{name}: no data rows")));
    }
    let x = DMatrix::from_fn(rows.len(), feature_idx.len(), |i, j| {
        rows[i][feature_idx[j]]
    });
    let y = DMatrix::from_fn(rows.len(), target_idx.len(), |i, j| rows[i][target_idx[j]]);
    let mut ds = Dataset::from_arrays(name, x, y)?;
    ds.feature_names = feature_idx.iter().map(|&i| header[i].clone()).collect();
    ds.target_names = target_idx.iter().map(|&i| header[i].clone()).collect();
    Ok(ds)
}

fn csv_error(e: csv::Error, row: usize) -> DkmError {
    match e.kind() {
        csv::ErrorKind::UnequalLengths {
            pos,
            expected_len,
            len,
        } => DkmError::Parse {
            row: pos.as_ref().map(|p| p.line() as usize).unwrap_or(row),
            column: (*len as usize).min(*expected_len as usize) + 1,
            message: format!("ragged row: expected {expected_len} fields, found {len}"),
        },
        csv::ErrorKind::Io(_) => DkmError::Io(std::io::Error::other(e.to_string())),
        _ => DkmError::Parse {
            row,
            column: 0,
            message: e.to_string(),
        },
    }
}

/// Disjoint train/test index lists.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub seed: u64,
    /// Fraction held out for testing, in per-mille to keep the type `Eq`.
    pub test_per_mille: u32,
}

impl Split {
    /// Seeded random split holding out `test_fraction` of the `p` rows.
    pub fn random(p: usize, test_fraction: f64, seed: u64) -> Result<Self> {
        if !(test_fraction > 0.0 && test_fraction < 1.0) {
            return Err(invalid(format!(
                "test fraction must lie in (0, 1), got {test_fraction}"
            )));
        }
        if p < 2 {
            return Err(invalid("need at least two rows to split"));
        }
        let mut idx: Vec<usize> = (0..p).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_test = ((p as f64 * test_fraction).round() as usize).clamp(1, p - 1);
        let mut test_indices = idx[..n_test].to_vec();
        let mut train_indices = idx[n_test..].to_vec();
        test_indices.sort_unstable();
        train_indices.sort_unstable();
        Ok(Split {
            train_indices,
            test_indices,
            seed,
            test_per_mille: (test_fraction * 1000.0).round() as u32,
        })
    }

    /// `n` splits with seeds `base_seed, base_seed + 1, …`.
    pub fn repeated(p: usize, test_fraction: f64, base_seed: u64, n: usize) -> Result<Vec<Self>> {
        (0..n as u64)
            .map(|k| Split::random(p, test_fraction, base_seed + k))
            .collect()
    }

    pub fn test_fraction(&self) -> f64 {
        self.test_per_mille as f64 / 1000.0
    }
}

fn column_stats(m: &DMatrix<f64>, rows: &[usize], col: usize) -> (f64, f64) {
    let n = rows.len() as f64;
    let mean = rows.iter().map(|&r| m[(r, col)]).sum::<f64>() / n;
    let var = rows
        .iter()
        .map(|&r| (m[(r, col)] - mean).powi(2))
        .sum::<f64>()
        / n;
    (mean, var.sqrt())
}

/// Z-scores every column with statistics from the training rows only. Input
/// columns that are constant on the training rows are dropped with a warning;
/// a constant target is an error.
pub fn standardize(dataset: &Dataset, split: &Split) -> Result<Dataset> {
    let train = &split.train_indices;
    if train.is_empty() {
        return Err(invalid("split has no training rows"));
    }
    if let Some(&bad) = train
        .iter()
        .chain(&split.test_indices)
        .find(|&&i| i >= dataset.len())
    {
        return Err(invalid(format!(
            "split index {bad} out of range for {} rows",
            dataset.len()
        )));
    }
    let mut keep = Vec::new();
    let (mut fmeans, mut fstds) = (Vec::new(), Vec::new());
    for j in 0..dataset.x.ncols() {
        let (m, s) = column_stats(&dataset.x, train, j);
        if s <= 1e-12 * m.abs().max(1.0) {
            log::warn!(
                "{}: dropping constant input column {:?}",
                dataset.name,
                dataset.feature_names.get(j)
            );
            continue;
        }
        keep.push(j);
        fmeans.push(m);
        fstds.push(s);
    }
    if keep.is_empty() {
        return Err(DkmError::Degenerate(format!(
            "{}: every input column is constant",
            dataset.name
        )));
    }
    let (mut tmeans, mut tstds) = (Vec::new(), Vec::new());
    for j in 0..dataset.y.ncols() {
        let (m, s) = column_stats(&dataset.y, train, j);
        if s <= 1e-12 * m.abs().max(1.0) {
            return Err(DkmError::Degenerate(format!(
                "{}: target column {:?} is constant on the training rows",
                dataset.name,
                dataset.target_names.get(j)
            )));
        }
        tmeans.push(m);
        tstds.push(s);
    }
    let x = DMatrix::from_fn(dataset.len(), keep.len(), |i, k| {
        (dataset.x[(i, keep[k])] - fmeans[k]) / fstds[k]
    });
    let y = DMatrix::from_fn(dataset.len(), dataset.y.ncols(), |i, j| {
        (dataset.y[(i, j)] - tmeans[j]) / tstds[j]
    });
    Ok(Dataset {
        name: dataset.name.clone(),
        x,
        y,
        feature_names: keep
            .iter()
            .map(|&j| dataset.feature_names[j].clone())
            .collect(),
        target_names: dataset.target_names.clone(),
        feature_means: fmeans,
        feature_stds: fstds,
        target_means: tmeans,
        target_stds: tstds,
    })
}

/// `G_0 = (1/ν_0) X Xᵀ`.
pub fn input_gram(dataset: &Dataset) -> GramMatrix {
    let x = &dataset.x;
    GramMatrix::from_trusted(x * x.transpose() / x.ncols() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum SubsetMode {
    First,
    Random { seed: u64 },
}

/// The first `n` rows, or `n` seeded random rows kept in their original order.
pub fn subset(dataset: &Dataset, n: usize, mode: SubsetMode) -> Result<Dataset> {
    if n == 0 || n > dataset.len() {
        return Err(invalid(format!(
            "subset size {n} out of range 1..={}",
            dataset.len()
        )));
    }
    let rows: Vec<usize> = match mode {
        SubsetMode::First => (0..n).collect(),
        SubsetMode::Random { seed } => {
            let mut idx: Vec<usize> = (0..dataset.len()).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let mut rows = idx[..n].to_vec();
            rows.sort_unstable();
            rows
        }
    };
    Ok(dataset.select(&rows))
}
