//! Small synthetic runs of the width-convergence and unimodality protocols.

mod common;

use dkm::{
    gram_rmse, init_prior, init_random_scaled, langevin_summary, optimize, DgpConfig, KernelSpec,
    ObjectiveKind, OptimizerConfig, Problem, WidthProfile,
};

fn decaying(iterations: usize) -> OptimizerConfig {
    OptimizerConfig {
        learning_rate: 1e-2,
        final_learning_rate: Some(1e-5),
        iterations,
        ..OptimizerConfig::default()
    }
}

#[test]
fn langevin_grams_approach_dkm_optimum_with_width() {
    let ds = common::synthetic_regression(20, 3, 21);
    let (g0, y) = common::standardized_problem(&ds);
    let base = DgpConfig {
        chains: 2,
        burn_in: 4000,
        thin: 50,
        samples_per_chain: 100,
        ..DgpConfig::default()
    };
    let widths = base.width_profile(3, 1).unwrap();
    let problem = Problem::new(
        g0.clone(),
        y.clone(),
        base.kernels.clone(),
        widths,
        base.noise_var,
    )
    .unwrap();
    let (params, _) = optimize(
        init_prior(&g0, &base.kernels).unwrap(),
        ObjectiveKind::Dkm,
        &decaying(4000),
        &problem,
    )
    .unwrap();
    let optimum = &params.grams()[0];
    let rmse: Vec<f64> = [16, 256]
        .iter()
        .map(|&w| {
            let config = DgpConfig {
                widths: vec![w],
                ..base.clone()
            };
            let summary = langevin_summary(&g0, &y, &config, 0).unwrap();
            gram_rmse(&summary.grams[0], optimum).unwrap()
        })
        .collect();
    assert!(
        rmse[1] < 0.5 * rmse[0],
        "width 16: {:.3e}, width 256: {:.3e}",
        rmse[0],
        rmse[1]
    );
}

#[test]
fn random_starts_reach_one_optimum() {
    let ds = common::synthetic_regression(20, 3, 22);
    let (g0, y) = common::standardized_problem(&ds);
    let kernels = vec![KernelSpec::sqexp(1.0), KernelSpec::sqexp(1.0)];
    let widths = WidthProfile::new(vec![20.0, 5.0, 1.0]).unwrap();
    let problem = Problem::new(g0.clone(), y, kernels.clone(), widths, 0.01).unwrap();
    let mut values = Vec::new();
    let mut grams = Vec::new();
    for seed in 0..3 {
        let init = init_random_scaled(&g0, &kernels, seed).unwrap();
        let (params, _) = optimize(init, ObjectiveKind::Dkm, &decaying(20_000), &problem).unwrap();
        values.push(
            problem
                .evaluate(&params.grams_raw(), ObjectiveKind::Dkm)
                .unwrap()
                .value,
        );
        grams.push(params.grams()[0].clone());
    }
    let spread = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - values.iter().cloned().fold(f64::INFINITY, f64::min);
    assert!(
        spread < 1e-3,
        "objective spread {spread:.2e} over {values:?}"
    );
    for i in 1..grams.len() {
        let d = gram_rmse(&grams[0], &grams[i]).unwrap();
        assert!(d < 1e-2, "start {i} differs by {d:.2e}");
    }
}
