#![allow(dead_code)]

use std::path::PathBuf;

use dkm::{Dataset, DatasetSource, GramMatrix, RegressionTargets, Split};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Smooth nonlinear regression data with a little noise.
pub fn synthetic_regression(p: usize, d: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(p, d, |_, _| rng.random_range(-1.5f64..1.5));
    let y = DMatrix::from_fn(p, 1, |i, _| {
        let r = x.row(i);
        let s: f64 = r
            .iter()
            .enumerate()
            .map(|(j, v)| (1.0 + j as f64) * v)
            .sum();
        (1.5 * r[0]).sin() * (s / d as f64).cos()
            + 0.3 * r[d - 1] * r[d - 1]
            + 0.05 * rng.sample::<f64, _>(StandardNormal)
    });
    Dataset::from_arrays("synthetic", x, y).unwrap()
}

/// Standardized inputs' Gram matrix and targets of every row.
pub fn standardized_problem(ds: &Dataset) -> (GramMatrix, RegressionTargets) {
    let all = Split {
        train_indices: (0..ds.len()).collect(),
        test_indices: vec![],
        seed: 0,
        test_per_mille: 0,
    };
    let std = dkm::standardize(ds, &all).unwrap();
    (
        dkm::input_gram(&std),
        RegressionTargets::new(std.y.clone()).unwrap(),
    )
}

/// Looks for `<name>.csv` under `$DKM_DATA_DIR`, then under `data/` at the
/// workspace root. The target is the last column.
pub fn benchmark(name: &str) -> Result<Dataset, String> {
    let mut dirs = Vec::new();
    if let Ok(d) = std::env::var("DKM_DATA_DIR") {
        dirs.push(PathBuf::from(d));
    }
    dirs.push(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data"));
    for dir in &dirs {
        let path = dir.join(format!("{name}.csv"));
        if path.exists() {
            let src = DatasetSource {
                name: name.to_string(),
                path,
                targets: vec![],
            };
            return src.load().map_err(|e| format!("{name}: {e}"));
        }
    }
    Err(format!("{name}.csv not found (looked in {dirs:?})"))
}
