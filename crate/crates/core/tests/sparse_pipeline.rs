mod common;

use std::time::Instant;

use dkm::io::{read_checkpoint, write_checkpoint};
use dkm::sparse::{predict, sparse_objective_terms, SparseObjectiveOptions};
use dkm::{
    init_sparse_state, nngp_baseline, predict_marginals, run_split, train_sparse, Chol, GramMatrix,
    KernelSpec, ObjectiveKind, OutputMode, SparseConfig, SparseMethod, SparseState, Split,
    SplitSetup, WidthProfile,
};
use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rows(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), m.ncols(), |r, c| m[(idx[r], c)])
}

fn problem(p: usize, seed: u64) -> (DMatrix<f64>, DMatrix<f64>) {
    let ds = common::synthetic_regression(p, 3, seed);
    (ds.x, ds.y)
}

fn kernels() -> Vec<KernelSpec> {
    vec![
        KernelSpec::sqexp(1.2),
        KernelSpec::Skip {
            w1: 0.5,
            w2: 0.5,
            lengthscale: 1.0,
        },
        KernelSpec::sqexp(0.8),
    ]
}

fn widths() -> WidthProfile {
    WidthProfile::new(vec![3.0, 2.0, 1.0, 1.0]).unwrap()
}

fn short_config(iterations: usize) -> SparseConfig {
    let mut c = SparseConfig {
        inducing: 12,
        ..SparseConfig::default()
    };
    c.optimizer.iterations = iterations;
    c.optimizer.learning_rate = 1e-2;
    c
}

#[test]
fn minibatch_likelihood_is_unbiased() {
    let (x, y) = problem(40, 1);
    let state = init_sparse_state(&x, &y, kernels(), widths(), 0.05, &short_config(0)).unwrap();
    let opts = SparseObjectiveOptions::default();
    let lik = |xb: &DMatrix<f64>, yb: &DMatrix<f64>| {
        sparse_objective_terms(&state, xb, yb, 40, opts)
            .unwrap()
            .expected_log_lik()
    };
    let full = lik(&x, &y);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let draws: Vec<f64> = (0..200)
        .map(|_| {
            let idx = sample(&mut rng, 40, 8).into_vec();
            lik(&rows(&x, &idx), &rows(&y, &idx))
        })
        .collect();
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let se = (draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
    assert!(
        (mean - full).abs() < 4.0 * se,
        "mean {mean} vs full {full} (se {se})"
    );
}

#[test]
fn marginal_prediction_scales_linearly() {
    let (x, y) = problem(30, 2);
    let state = init_sparse_state(&x, &y, kernels(), widths(), 0.05, &short_config(0)).unwrap();
    let time = |n: usize| {
        let xt = DMatrix::from_fn(n, 3, |i, j| ((i * 7 + j * 3) % 17) as f64 / 8.0 - 1.0);
        let mut best = f64::INFINITY;
        for _ in 0..5 {
            let start = Instant::now();
            predict_marginals(&state, &xt).unwrap();
            best = best.min(start.elapsed().as_secs_f64());
        }
        best
    };
    time(2000);
    let ratio = time(16000) / time(8000);
    assert!(
        (1.3..3.0).contains(&ratio),
        "doubling the points changed time by {ratio}"
    );
}

/// Exact GP regression on the joint kernel recursion of train and test inputs.
fn recursion_gp(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    xt: &DMatrix<f64>,
    kernels: &[KernelSpec],
    noise: f64,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let (p, pt) = (x.nrows(), xt.nrows());
    let all = DMatrix::from_fn(p + pt, x.ncols(), |i, j| {
        if i < p {
            x[(i, j)]
        } else {
            xt[(i - p, j)]
        }
    });
    let mut g = GramMatrix::new(&all * all.transpose() / x.ncols() as f64).unwrap();
    for k in kernels {
        g = k.apply(&g).unwrap();
    }
    let k = g.matrix();
    let k_ii = k.view((0, 0), (p, p)).into_owned() + DMatrix::identity(p, p) * noise;
    let k_ti = k.view((p, 0), (pt, p)).into_owned();
    let chol = Chol::new(&k_ii).unwrap();
    let mean = &k_ti * chol.solve(y);
    let cov = k.view((p, p), (pt, pt)).into_owned() - &k_ti * chol.solve(&k_ti.transpose())
        + DMatrix::identity(pt, pt) * noise;
    (mean, cov)
}

#[test]
fn untrained_nngp_matches_direct_gp() {
    let (x, y) = problem(20, 4);
    let (xt, _) = problem(7, 5);
    let mut config = short_config(0);
    config.inducing = 20;
    let (state, _) = nngp_baseline(&x, &y, kernels(), widths(), 0.1, &config).unwrap();
    let (mean, cov) = predict(&state, &xt).unwrap();
    let (want_mean, want_cov) = recursion_gp(&x, &y, &xt, &kernels(), 0.1);
    assert!(
        (&mean - &want_mean).amax() < 1e-6,
        "{}",
        (&mean - &want_mean).amax()
    );
    // The sparse covariance treats the inducing outputs as known; it can only
    // be tighter than the exact posterior.
    for i in 0..7 {
        assert!(cov[(i, i)] <= want_cov[(i, i)] + 1e-8);
        assert!(cov[(i, i)] >= 0.1 - 1e-8);
    }
}

#[test]
fn pinned_layers_have_zero_kl() {
    let (x, y) = problem(25, 6);
    let state = init_sparse_state(&x, &y, kernels(), widths(), 0.05, &short_config(0)).unwrap();
    for kind in [ObjectiveKind::Dkm, ObjectiveKind::Map] {
        let opts = SparseObjectiveOptions {
            pinned: true,
            kind,
            ..SparseObjectiveOptions::default()
        };
        let terms = sparse_objective_terms(&state, &x, &y, 25, opts).unwrap();
        assert!(
            terms.layer_terms.iter().all(|t| *t == 0.0),
            "{:?}",
            terms.layer_terms
        );
        let free = sparse_objective_terms(
            &state,
            &x,
            &y,
            25,
            SparseObjectiveOptions {
                pinned: false,
                ..opts
            },
        )
        .unwrap();
        // The initial state sits on the recursion: same fit, and a zero KL.
        assert!(
            (terms.expected_log_lik() - free.expected_log_lik()).abs()
                < 1e-9 * terms.value.abs().max(1.0)
        );
        if kind == ObjectiveKind::Dkm {
            assert!(
                free.layer_terms.iter().all(|t| t.abs() < 1e-8),
                "{:?}",
                free.layer_terms
            );
        }
    }
}

#[test]
fn prediction_at_inducing_points_returns_outputs() {
    let (x, y) = problem(15, 7);
    let state = init_sparse_state(&x, &y, kernels(), widths(), 1e-10, &short_config(0)).unwrap();
    let (mean, cov) = predict(&state, &state.inducing_inputs).unwrap();
    assert!((&mean - &state.inducing_outputs).amax() < 1e-6);
    assert!(cov.diagonal().amax() < 1e-6, "{}", cov.diagonal().amax());
}

#[test]
fn checkpoint_round_trip_predicts_identically() {
    let (x, y) = problem(30, 8);
    let (xt, _) = problem(9, 9);
    let (state, _) = train_sparse(
        init_sparse_state(&x, &y, kernels(), widths(), 0.05, &short_config(0)).unwrap(),
        &x,
        &y,
        &short_config(20),
    )
    .unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &state).unwrap();
    let back: SparseState = read_checkpoint(buf.as_slice()).unwrap();
    let (m1, v1) = predict_marginals(&state, &xt).unwrap();
    let (m2, v2) = predict_marginals(&back, &xt).unwrap();
    assert_eq!(m1, m2);
    assert_eq!(v1, v2);
}

#[test]
fn training_is_deterministic_and_improves() {
    let (x, y) = problem(40, 10);
    for output in [OutputMode::Learned, OutputMode::Collapsed] {
        let mut config = short_config(150);
        config.output = output;
        if output == OutputMode::Learned {
            config.batch_size = Some(16);
        }
        let run = || {
            let init = init_sparse_state(&x, &y, kernels(), widths(), 0.05, &config).unwrap();
            train_sparse(init, &x, &y, &config).unwrap()
        };
        let (a, ta) = run();
        let (b, tb) = run();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let obj = ta.objectives();
        let (first, last) = (obj[0], *obj.last().unwrap());
        assert!(last > first, "{output:?}: {first} -> {last}");
    }
}

#[test]
fn split_runs_for_every_method() {
    let ds = common::synthetic_regression(60, 3, 11);
    let split = Split::random(ds.len(), 0.2, 0).unwrap();
    let mut setup = SplitSetup::default();
    setup.sparse.inducing = 20;
    setup.sparse.optimizer.iterations = 30;
    setup.sparse.optimizer.learning_rate = 1e-2;
    for method in SparseMethod::ALL {
        let run = run_split(&ds, &split, method, &setup).unwrap();
        let o = &run.outcome;
        assert_eq!((o.n_train, o.n_test, o.n_inducing), (48, 12, 20));
        assert_eq!(o.method, method);
        assert!(o.test_rmse.is_finite() && o.test_rmse > 0.0);
        assert_eq!(run.trace.rows.len(), 31);
    }
}
