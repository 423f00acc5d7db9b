//! One train/test split of the inducing-point regression benchmark.

use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{standardize, Dataset, Split};
use crate::error::{invalid, Result};
use crate::gram::WidthProfile;
use crate::kernels::KernelSpec;
use crate::objective::ObjectiveKind;
use crate::optimizer::Trace;
use crate::sparse::{
    init_sparse_state, nngp_baseline, predict_marginals, train_sparse, OutputMode, SparseConfig,
    SparseState,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SparseMethod {
    /// Gram matrices pinned to the kernel recursion.
    Nngp,
    Map,
    Dkm,
}

impl SparseMethod {
    pub const ALL: [SparseMethod; 3] = [SparseMethod::Nngp, SparseMethod::Map, SparseMethod::Dkm];

    pub fn name(self) -> &'static str {
        match self {
            SparseMethod::Nngp => "nngp",
            SparseMethod::Map => "map",
            SparseMethod::Dkm => "dkm",
        }
    }
}

/// Model and training settings shared by every method on a split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSetup {
    pub hidden_layers: usize,
    /// Kernel used at every layer, output layer included.
    pub kernel: KernelSpec,
    /// `ν_ℓ` for every hidden layer.
    pub hidden_nu: f64,
    /// Initial noise variance as a fraction of the (standardized) target variance.
    pub noise_fraction: f64,
    pub sparse: SparseConfig,
}

impl Default for SplitSetup {
    fn default() -> Self {
        SplitSetup {
            hidden_layers: 2,
            kernel: KernelSpec::Skip {
                w1: 0.5,
                w2: 0.5,
                lengthscale: 1.0,
            },
            hidden_nu: 5.0,
            noise_fraction: 0.01,
            sparse: SparseConfig {
                output: OutputMode::Collapsed,
                ..SparseConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitOutcome {
    pub dataset: String,
    pub method: SparseMethod,
    pub split_seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub n_inducing: usize,
    pub test_rmse: f64,
    pub final_objective: f64,
    pub noise_var: f64,
    pub seconds: f64,
}

pub struct SplitRun {
    pub outcome: SplitOutcome,
    pub state: SparseState,
    pub trace: Trace,
    /// The standardized view, carrying the statistics needed to map back.
    pub standardized: Dataset,
}

/// Standardizes on the training rows, trains `method` and reports test RMSE
/// in original target units.
pub fn run_split(
    dataset: &Dataset,
    split: &Split,
    method: SparseMethod,
    setup: &SplitSetup,
) -> Result<SplitRun> {
    if setup.hidden_layers == 0 {
        return Err(invalid("need at least one hidden layer"));
    }
    setup.kernel.validate()?;
    let start = Instant::now();
    let std = standardize(dataset, split)?;
    let train = std.select(&split.train_indices);
    let test = std.select(&split.test_indices);
    let widths = WidthProfile::uniform(
        train.x.ncols() as f64,
        setup.hidden_nu,
        setup.hidden_layers,
        train.y.ncols() as f64,
    )?;
    let kernels = vec![setup.kernel.clone(); setup.hidden_layers + 1];
    let noise = setup.noise_fraction * target_variance(&train.y);
    let mut config = setup.sparse.clone();
    let (state, trace) = match method {
        SparseMethod::Nngp => nngp_baseline(&train.x, &train.y, kernels, widths, noise, &config)?,
        SparseMethod::Map | SparseMethod::Dkm => {
            config.objective = if method == SparseMethod::Map {
                ObjectiveKind::Map
            } else {
                ObjectiveKind::Dkm
            };
            let init = init_sparse_state(&train.x, &train.y, kernels, widths, noise, &config)?;
            train_sparse(init, &train.x, &train.y, &config)?
        }
    };
    let (mean, _) = predict_marginals(&state, &test.x)?;
    let test_rmse = test.rmse_original_units(&mean)?;
    let outcome = SplitOutcome {
        dataset: dataset.name.clone(),
        method,
        split_seed: split.seed,
        n_train: train.len(),
        n_test: test.len(),
        n_inducing: state.n_inducing(),
        test_rmse,
        final_objective: trace.last().map_or(f64::NAN, |r| r.objective),
        noise_var: state.noise_var,
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok(SplitRun {
        outcome,
        state,
        trace,
        standardized: std,
    })
}

fn target_variance(y: &DMatrix<f64>) -> f64 {
    let n = y.nrows() as f64;
    let mut total = 0.0;
    for col in y.column_iter() {
        let mean = col.sum() / n;
        total += col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    }
    total / y.ncols() as f64
}
