//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.
//!
//! Criteria 8, 10 and 11 need `yacht.csv` (and `energy.csv` for 10) under
//! `$DKM_DATA_DIR` or `data/` at the workspace root, target in the last column.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use dkm::dgp::relu_dkm_objective_scalar;
use dkm::linalg::rel_frobenius;
use dkm::sparse::{sparse_objective_terms, SparseObjectiveOptions};
use dkm::*;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Res<T> = std::result::Result<T, String>;
type Outcome = Res<String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Res<()> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn normal_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn random_pd(rng: &mut ChaCha8Rng, p: usize) -> DMatrix<f64> {
    let a = normal_matrix(rng, p, p + 2);
    &a * a.transpose() / (p + 2) as f64 + DMatrix::identity(p, p) * 0.1
}

fn decaying(lr: f64, final_lr: f64, iterations: usize) -> OptimizerConfig {
    OptimizerConfig {
        learning_rate: lr,
        final_learning_rate: Some(final_lr),
        iterations,
        ..Default::default()
    }
}

fn raw(grams: &[GramMatrix]) -> Vec<DMatrix<f64>> {
    grams.iter().map(|g| g.matrix().clone()).collect()
}

fn linear_oracle_convergence() -> Outcome {
    let p = 10;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = normal_matrix(&mut rng, p, 12);
    let g0 = GramMatrix::new(&x * x.transpose() / 12.0).map_err(err)?;
    // Rank-3 output Gram, jittered to full rank.
    let yr = normal_matrix(&mut rng, p, 3);
    let mut gout = &yr * yr.transpose() / 3.0;
    let jitter = 1e-6 * gout.diagonal().mean();
    for i in 0..p {
        gout[(i, i)] += jitter;
    }
    let gout = GramMatrix::new(gout).map_err(err)?;
    let y = Chol::new(gout.matrix()).map_err(err)?.l() * (p as f64).sqrt();
    let oracle = linear_equal_width(&g0, &gout, 3).map_err(err)?;
    let kernels = vec![KernelSpec::Linear; 4];
    let widths = WidthProfile::new(vec![12.0, 10.0, 10.0, 10.0, 10.0]).map_err(err)?;
    let problem = Problem::new(
        g0.clone(),
        RegressionTargets::new(y).map_err(err)?,
        kernels.clone(),
        widths,
        0.0,
    )
    .map_err(err)?;
    let start = Instant::now();
    let (params, _) = optimize(
        init_prior(&g0, &kernels).map_err(err)?,
        ObjectiveKind::Dkm,
        &decaying(1e-2, 1e-5, 20_000),
        &problem,
    )
    .map_err(err)?;
    let secs = start.elapsed().as_secs_f64();
    let worst = params
        .grams()
        .iter()
        .zip(&oracle.grams)
        .map(|(a, b)| rel_frobenius(a.matrix(), b.matrix()))
        .fold(0.0, f64::max);
    ensure(worst < 1e-3, format!("relative error {worst:.2e} >= 1e-3"))?;
    ensure(secs < 60.0, format!("took {secs:.1}s"))?;

    let one = |v: f64| GramMatrix::new(DMatrix::from_element(1, 1, v)).unwrap();
    let scalar = linear_equal_width(&one(1.0), &one(16.0), 3).map_err(err)?;
    for (g, want) in scalar.grams.iter().zip([2.0, 4.0, 8.0]) {
        let got = g.matrix()[(0, 0)];
        ensure(
            (got - want).abs() < 1e-10,
            format!("scalar chain gave {got}, want {want}"),
        )?;
    }
    Ok(format!(
        "max relative error {worst:.2e} in {secs:.1}s; scalar chain (2, 4, 8)"
    ))
}

fn general_width_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = 5;
    let g0 = GramMatrix::new(random_pd(&mut rng, p)).map_err(err)?;
    let gout = GramMatrix::new(random_pd(&mut rng, p)).map_err(err)?;
    // ν_1, ν_2 and ν_3 = ν_{L+1}.
    let nus = [2.0, 1.0, 3.0];
    let sol = linear_general_width(&g0, &gout, &nus).map_err(err)?;
    let mut chain = vec![g0.matrix().clone()];
    chain.extend(raw(&sol.grams));
    chain.push(gout.matrix().clone());
    let mut worst: f64 = 0.0;
    // Stationarity of the hidden layers 1..L.
    for l in 1..chain.len() - 1 {
        let (nu_l, nu_next) = (nus[l - 1], nus[l]);
        let inv_prev = Chol::new(&chain[l - 1]).map_err(err)?.inverse();
        let inv_here = Chol::new(&chain[l]).map_err(err)?.inverse();
        let r = &inv_here * &chain[l + 1] * nu_next
            - &inv_prev * &chain[l] * nu_l
            - DMatrix::identity(p, p) * (nu_next - nu_l);
        worst = worst.max(r.norm());
    }
    ensure(worst < 1e-8, format!("stationarity residual {worst:.2e}"))?;

    let a = linear_general_width(&g0, &gout, &[2.0; 3]).map_err(err)?;
    let b = linear_equal_width(&g0, &gout, 2).map_err(err)?;
    let diff = a
        .grams
        .iter()
        .zip(&b.grams)
        .map(|(x, y)| (x.matrix() - y.matrix()).norm())
        .fold(0.0, f64::max);
    ensure(
        diff < 1e-8,
        format!("equal-width reduction differs by {diff:.2e}"),
    )?;
    Ok(format!(
        "residual {worst:.1e}, equal-width difference {diff:.1e}"
    ))
}

fn standard_limit_recovery() -> Outcome {
    let p = 20;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = normal_matrix(&mut rng, p, 5);
    let g0 = GramMatrix::new(&x * x.transpose() / 5.0).map_err(err)?;
    let y = RegressionTargets::new(normal_matrix(&mut rng, p, 1)).map_err(err)?;
    let mut report = Vec::new();
    for kernel in [KernelSpec::sqexp(1.0), KernelSpec::LeakyRelu { p: 0.5 }] {
        let kernels = vec![kernel.clone(); 3];
        let widths = WidthProfile::new(vec![5.0, 1.0, 1.0, 1.0]).map_err(err)?;
        let problem = Problem::new(g0.clone(), y.clone(), kernels.clone(), widths, 0.1)
            .map_err(err)?
            .with_likelihood_weight(0.0);
        let mut init = init_prior(&g0, &kernels).map_err(err)?;
        for f in init.factors.iter_mut() {
            *f += normal_matrix(&mut rng, p, p) * 0.1;
        }
        let (params, _) = optimize(
            init,
            ObjectiveKind::Dkm,
            &decaying(1e-2, 1e-6, 20_000),
            &problem,
        )
        .map_err(err)?;
        let mut prev = g0.clone();
        let mut worst: f64 = 0.0;
        for g in params.grams() {
            let target = kernel.apply(&prev).map_err(err)?;
            worst = worst.max((g.matrix() - target.matrix()).norm());
            prev = target;
        }
        ensure(
            worst < 1e-6,
            format!("{}: Frobenius error {worst:.2e}", kernel.name()),
        )?;
        report.push(format!("{} {worst:.1e}", kernel.name()));
    }
    Ok(report.join(", "))
}

fn gradient_correctness() -> Outcome {
    let variants = [
        KernelSpec::Linear,
        KernelSpec::sqexp(1.2),
        KernelSpec::ArcCosRelu,
        KernelSpec::LeakyRelu { p: 0.5 },
        KernelSpec::Skip {
            w1: 0.4,
            w2: 0.9,
            lengthscale: 0.8,
        },
    ];
    let p = 5;
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (vi, kernel) in variants.iter().enumerate() {
        for inst in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 * vi as u64 + inst);
            let x = normal_matrix(&mut rng, p, 3);
            let g0 = GramMatrix::new(&x * x.transpose() / 3.0 + DMatrix::identity(p, p) * 0.05)
                .map_err(err)?;
            let y = RegressionTargets::new(normal_matrix(&mut rng, p, 2)).map_err(err)?;
            let widths = WidthProfile::new(vec![3.0, 1.5, 0.7, 2.0]).map_err(err)?;
            let problem = Problem::new(g0, y, vec![kernel.clone(); 3], widths, 0.2).map_err(err)?;
            let grams = vec![random_pd(&mut rng, p), random_pd(&mut rng, p)];
            for kind in [ObjectiveKind::Dkm, ObjectiveKind::Map] {
                let (_, grads) = problem.evaluate_with_grad(&grams, kind).map_err(err)?;
                for l in 0..2 {
                    let mut fd = DMatrix::zeros(p, p);
                    for i in 0..p {
                        for j in 0..=i {
                            let bump = |s: f64| {
                                let mut g = grams.clone();
                                g[l][(i, j)] += s * h;
                                if i != j {
                                    g[l][(j, i)] += s * h;
                                }
                                problem.evaluate(&g, kind).unwrap().value
                            };
                            let d = (bump(1.0) - bump(-1.0)) / (2.0 * h);
                            // A symmetric bump moves two entries, so split the slope.
                            let d = if i == j { d } else { d / 2.0 };
                            fd[(i, j)] = d;
                            fd[(j, i)] = d;
                        }
                    }
                    let rel = rel_frobenius(&grads[l], &fd);
                    worst = worst.max(rel);
                    ensure(
                        rel < 1e-4,
                        format!(
                            "{} instance {inst} {kind:?} layer {}: relative error {rel:.2e}",
                            kernel.name(),
                            l + 1
                        ),
                    )?;
                }
            }
        }
    }
    Ok(format!(
        "50 instances x 2 objectives, worst relative error {worst:.1e}"
    ))
}

fn kernel_consistency() -> Outcome {
    let n = 1_000_000;
    let cases = [
        ("arccos", KernelSpec::ArcCosRelu, None),
        ("leaky 0.25", KernelSpec::LeakyRelu { p: 0.25 }, Some(0.25)),
        ("leaky 0.5", KernelSpec::LeakyRelu { p: 0.5 }, Some(0.5)),
        ("leaky 1", KernelSpec::LeakyRelu { p: 1.0 }, Some(1.0)),
    ];
    let pairs = [
        (1.0, 1.0, 0.3),
        (0.5, 2.0, -0.7),
        (1.5, 0.8, 1.05),
        (2.0, 2.0, 0.0),
    ];
    let mut worst_z: f64 = 0.0;
    let mut worst_diag: f64 = 0.0;
    for (ci, (name, kernel, leak)) in cases.iter().enumerate() {
        let phi = |v: f64| match leak {
            None => std::f64::consts::SQRT_2 * v.max(0.0),
            Some(p) => leaky_relu_pointwise(v, *p),
        };
        for (pi, &(a, b, c)) in pairs.iter().enumerate() {
            let g = DMatrix::from_row_slice(2, 2, &[a, c, c, b]);
            let k = kernel
                .apply(&GramMatrix::new(g.clone()).map_err(err)?)
                .map_err(err)?;
            let l = Chol::new(&g).map_err(err)?.into_l();
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + 10 * ci as u64 + pi as u64);
            let (mut sum, mut sum_sq) = (0.0, 0.0);
            for _ in 0..n {
                let z = DVector::from_fn(2, |_, _| rng.sample::<f64, _>(StandardNormal));
                let f = &l * z;
                let v = phi(f[0]) * phi(f[1]);
                sum += v;
                sum_sq += v * v;
            }
            let mean = sum / n as f64;
            let se = ((sum_sq / n as f64 - mean * mean) / n as f64).sqrt();
            let z = (mean - k.matrix()[(0, 1)]).abs() / se;
            worst_z = worst_z.max(z);
            ensure(
                z < 3.0,
                format!("{name} at ({a}, {b}, {c}): {z:.2} standard errors"),
            )?;
            let d = (k.matrix()[(0, 0)] - a)
                .abs()
                .max((k.matrix()[(1, 1)] - b).abs());
            worst_diag = worst_diag.max(d);
            ensure(d < 1e-10, format!("{name}: diagonal changed by {d:.2e}"))?;
        }
    }
    Ok(format!(
        "worst {worst_z:.2} standard errors, diagonal drift {worst_diag:.1e}"
    ))
}

fn wishart_limit() -> Outcome {
    // With ν = 1 the limit constant is zero.
    let mut lines = Vec::new();
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(60 + seed);
        let g = GramMatrix::new(random_pd(&mut rng, 5)).map_err(err)?;
        let k = GramMatrix::new(random_pd(&mut rng, 5)).map_err(err)?;
        let gaps: Vec<f64> = wishart_limit_check(&g, &k, &[100, 1000, 10_000])
            .map_err(err)?
            .into_iter()
            .map(f64::abs)
            .collect();
        ensure(
            gaps[0] > gaps[1] && gaps[1] > gaps[2],
            format!("instance {seed}: gaps {gaps:?} not strictly decreasing"),
        )?;
        lines.push(format!("{:.1e}", gaps[2]));
    }
    Ok(format!(
        "gaps strictly decrease; at N = 10000: {}",
        lines.join(", ")
    ))
}

fn sparse_full_equivalence() -> Outcome {
    let ds = common::synthetic_regression(25, 3, 7);
    let (x, y) = (ds.x.rows(0, 20).into_owned(), ds.y.rows(0, 20).into_owned());
    let x_test = ds.x.rows(20, 5).into_owned();
    let g0 = GramMatrix::new(&x * x.transpose() / 3.0).map_err(err)?;
    let kernels = vec![
        KernelSpec::sqexp(1.3),
        KernelSpec::sqexp(1.1),
        KernelSpec::sqexp(1.0),
    ];
    let widths = WidthProfile::new(vec![3.0, 2.0, 2.0, 1.0]).map_err(err)?;
    let noise = 0.05;
    let targets = RegressionTargets::new(y.clone()).map_err(err)?;
    let problem =
        Problem::new(g0.clone(), targets, kernels.clone(), widths.clone(), noise).map_err(err)?;
    let (params, _) = optimize(
        init_prior(&g0, &kernels).map_err(err)?,
        ObjectiveKind::Dkm,
        &decaying(1e-2, 1e-4, 2000),
        &problem,
    )
    .map_err(err)?;
    let grams = params.grams();

    let mut state = SparseState::new(
        x.clone(),
        grams.clone(),
        y.clone(),
        kernels.clone(),
        widths.clone(),
        noise,
    )
    .map_err(err)?;
    state.inducing_outputs = state.projected_outputs(&x, &y).map_err(err)?;
    let (mean_s, _) = predict(&state, &x_test).map_err(err)?;
    let (mean_f, _) =
        full_predict(&grams, &x, &y, &kernels, &widths, noise, &x_test).map_err(err)?;
    let d_mean = (&mean_s - &mean_f).amax();
    ensure(
        d_mean < 1e-6,
        format!("predictive means differ by {d_mean:.2e}"),
    )?;
    let y_test = ds.y.rows(20, 5).into_owned();
    let d_rmse = (rmse(&mean_s, &y_test) - rmse(&mean_f, &y_test)).abs();
    ensure(d_rmse < 1e-6, format!("test RMSE differs by {d_rmse:.2e}"))?;

    let full = problem
        .evaluate(&raw(&grams), ObjectiveKind::Dkm)
        .map_err(err)?;
    let collapsed = SparseObjectiveOptions {
        output: OutputMode::Collapsed,
        ..Default::default()
    };
    let sparse = sparse_objective_terms(&state, &x, &y, 20, collapsed).map_err(err)?;
    let d_obj = (sparse.value - full.value).abs();
    ensure(
        d_obj < 1e-6 * full.value.abs().max(1.0),
        format!("objectives differ by {d_obj:.2e}"),
    )?;
    ensure(
        sparse.variance_correction.abs() < 1e-10,
        "variance correction non-zero at the inducing points",
    )?;

    // Off the inducing points the two differ exactly by the correction, which
    // shrinks as a batch point approaches an inducing point.
    let dir = DVector::from_vec(vec![0.6, -0.3, 0.74]);
    let mut last = f64::INFINITY;
    let mut corrections = Vec::new();
    for delta in [1e-1, 1e-2, 1e-3] {
        let xb = DMatrix::from_fn(1, 3, |_, j| x[(0, j)] + delta * dir[j]);
        let yb = DMatrix::from_element(1, 1, y[(0, 0)]);
        let t = sparse_objective_terms(&state, &xb, &yb, 1, collapsed).map_err(err)?;
        let c = t.variance_correction.abs();
        ensure(
            c < last,
            format!("correction {c:.2e} did not shrink at δ = {delta}"),
        )?;
        ensure(
            (t.value - t.fit - t.variance_correction
                + t.layer_terms
                    .iter()
                    .zip(widths.hidden())
                    .map(|(k, n)| k * n)
                    .sum::<f64>())
            .abs()
                < 1e-9,
            "objective is not fit + correction − Σν·KL",
        )?;
        corrections.push(format!("{c:.1e}"));
        last = c;
    }
    Ok(format!(
        "mean diff {d_mean:.1e}, RMSE diff {d_rmse:.1e}, objective diff {d_obj:.1e}; correction {}",
        corrections.join(" -> ")
    ))
}

fn yacht_subset() -> Res<dkm::Dataset> {
    let yacht = common::benchmark("yacht")?;
    subset(&yacht, 50, SubsetMode::First).map_err(err)
}

fn width_convergence() -> Outcome {
    let ds = yacht_subset()?;
    let (g0, y) = common::standardized_problem(&ds);
    let start = Instant::now();
    let base = DgpConfig {
        widths: vec![32],
        ..DgpConfig::default()
    };
    let widths = base.width_profile(ds.x.ncols(), 1).map_err(err)?;
    let problem = Problem::new(
        g0.clone(),
        y.clone(),
        base.kernels.clone(),
        widths,
        base.noise_var,
    )
    .map_err(err)?;
    let (params, _) = optimize(
        init_prior(&g0, &base.kernels).map_err(err)?,
        ObjectiveKind::Dkm,
        &decaying(1e-2, 1e-5, 5000),
        &problem,
    )
    .map_err(err)?;
    let dkm_gram = &params.grams()[0];
    let mut rmse = Vec::new();
    for width in [32, 512] {
        let config = DgpConfig {
            widths: vec![width],
            ..base.clone()
        };
        let summary = langevin_summary(&g0, &y, &config, 0).map_err(err)?;
        rmse.push(gram_rmse(&summary.grams[0], dkm_gram).map_err(err)?);
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(
        rmse[1] < 0.5 * rmse[0],
        format!("width 512 RMSE {:.3e} vs width 32 {:.3e}", rmse[1], rmse[0]),
    )?;
    ensure(secs < 1800.0, format!("took {secs:.0}s"))?;
    Ok(format!(
        "Gram RMSE {:.3e} at width 32, {:.3e} at width 512 ({secs:.0}s)",
        rmse[0], rmse[1]
    ))
}

fn posterior_shape() -> Outcome {
    let ds = common::synthetic_regression(50, 4, 9);
    let (g0, y) = common::standardized_problem(&ds);
    let config = DgpConfig {
        widths: vec![1024],
        chains: 4,
        ..DgpConfig::default()
    };
    let summary = langevin_summary(&g0, &y, &config, 0).map_err(err)?;
    let v = &summary.marginals[0];
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let m2 = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let m3 = v.iter().map(|x| (x - mean).powi(3)).sum::<f64>() / n;
    let m4 = v.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
    let skew = m3 / m2.powf(1.5);
    let kurt = m4 / (m2 * m2) - 3.0;
    ensure(
        skew.abs() < 0.5 && kurt.abs() < 0.5,
        format!("skewness {skew:.3}, excess kurtosis {kurt:.3}"),
    )?;
    Ok(format!(
        "{} pooled values: skewness {skew:.3}, excess kurtosis {kurt:.3}",
        v.len()
    ))
}

fn table_ordering() -> Outcome {
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    for name in ["yacht", "energy"] {
        let ds = common::benchmark(name)?;
        let start = Instant::now();
        let setup = SplitSetup::default();
        let splits = Split::repeated(ds.len(), 0.1, 0, 5).map_err(err)?;
        let mut wins = 0;
        let (mut dkm_sum, mut nngp_sum) = (0.0, 0.0);
        for split in &splits {
            let nngp = run_split(&ds, split, SparseMethod::Nngp, &setup)
                .map_err(err)?
                .outcome
                .test_rmse;
            let dkm = run_split(&ds, split, SparseMethod::Dkm, &setup)
                .map_err(err)?
                .outcome
                .test_rmse;
            if dkm < nngp {
                wins += 1;
            }
            dkm_sum += dkm;
            nngp_sum += nngp;
        }
        let secs = start.elapsed().as_secs_f64();
        let line = format!(
            "{name}: DKM better on {wins}/5, mean RMSE {:.3} vs {:.3} ({secs:.0}s)",
            dkm_sum / 5.0,
            nngp_sum / 5.0
        );
        if wins < 4 || secs >= 1800.0 {
            failures.push(line.clone());
        }
        lines.push(line);
    }
    if failures.is_empty() {
        Ok(lines.join("; "))
    } else {
        Err(lines.join("; "))
    }
}

fn unimodality() -> Outcome {
    let ds = yacht_subset()?;
    let (g0, y) = common::standardized_problem(&ds);
    let (objectives, grams) = unimodality_runs(&g0, &y)?;
    check_unimodal(&objectives, &grams)
}

pub fn unimodality_runs(
    g0: &GramMatrix,
    y: &RegressionTargets,
) -> Res<(Vec<f64>, Vec<GramMatrix>)> {
    let kernels = vec![KernelSpec::sqexp(1.0), KernelSpec::sqexp(1.0)];
    let widths = WidthProfile::new(vec![g0.p() as f64, 5.0, 1.0]).map_err(err)?;
    let problem =
        Problem::new(g0.clone(), y.clone(), kernels.clone(), widths, 0.01).map_err(err)?;
    let mut objectives = Vec::new();
    let mut grams = Vec::new();
    for seed in 0..5 {
        let init = init_random_scaled(g0, &kernels, seed).map_err(err)?;
        let (params, trace) = optimize(
            init,
            ObjectiveKind::Dkm,
            &decaying(1e-2, 1e-5, 20_000),
            &problem,
        )
        .map_err(err)?;
        let last = problem
            .evaluate(&params.grams_raw(), ObjectiveKind::Dkm)
            .map_err(err)?;
        debug_assert!(trace.last().is_some());
        objectives.push(last.value);
        grams.push(params.grams()[0].clone());
    }
    Ok((objectives, grams))
}

fn check_unimodal(objectives: &[f64], grams: &[GramMatrix]) -> Outcome {
    let spread = objectives.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - objectives.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut worst: f64 = 0.0;
    for i in 0..grams.len() {
        for j in 0..i {
            worst = worst.max(gram_rmse(&grams[i], &grams[j]).map_err(err)?);
        }
    }
    ensure(spread < 1e-3, format!("objective spread {spread:.2e}"))?;
    ensure(worst < 1e-2, format!("pairwise Gram RMSE {worst:.2e}"))?;
    Ok(format!(
        "objective spread {spread:.1e}, worst pairwise Gram RMSE {worst:.1e}"
    ))
}

fn map_vs_dkm() -> Outcome {
    let ds = common::synthetic_regression(20, 3, 12);
    let (g0, y) = common::standardized_problem(&ds);
    let dgp = DgpConfig {
        widths: vec![512],
        kernels: vec![KernelSpec::sqexp(1.0), KernelSpec::sqexp(1.0)],
        noise_var: 0.1,
        ..DgpConfig::default()
    };
    let widths = dgp.width_profile(g0.p(), 1).map_err(err)?;
    let problem = Problem::new(
        g0.clone(),
        y.clone(),
        dgp.kernels.clone(),
        widths,
        dgp.noise_var,
    )
    .map_err(err)?;
    let opt = decaying(1e-2, 1e-5, 10_000);
    let init = || init_prior(&g0, &dgp.kernels).map_err(err);
    let (dkm_params, _) = optimize(init()?, ObjectiveKind::Dkm, &opt, &problem).map_err(err)?;
    let (map_params, _) = optimize(init()?, ObjectiveKind::Map, &opt, &problem).map_err(err)?;
    let distinct = gram_rmse(&dkm_params.grams()[0], &map_params.grams()[0]).map_err(err)?;
    ensure(
        distinct > 1e-3,
        format!("DKM and MAP optima only {distinct:.2e} apart"),
    )?;

    let (features, _) = map_features_train(&g0, &y, &dgp, &opt).map_err(err)?;
    let feature_gram = gram_from_features(&features[0]);
    let agree = gram_rmse(&feature_gram, &map_params.grams()[0]).map_err(err)?;
    ensure(
        agree < 1e-2,
        format!("width-512 features vs square factors: {agree:.2e}"),
    )?;
    Ok(format!(
        "DKM vs MAP optimum {distinct:.2e}; width-512 MAP features vs direct {agree:.2e}"
    ))
}

fn vdkm_bound() -> Outcome {
    // Identity nonlinearity, zero means: bound and objective coincide.
    let p = 5;
    let mut worst_eq: f64 = 0.0;
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let x = normal_matrix(&mut rng, p, 2);
        let problem = VdkmProblem {
            g0: GramMatrix::new(&x * x.transpose() / 2.0 + DMatrix::identity(p, p) * 0.01)
                .map_err(err)?,
            y: RegressionTargets::new(normal_matrix(&mut rng, p, 1)).map_err(err)?,
            kernels: vec![KernelSpec::Linear; 3],
            widths: WidthProfile::new(vec![2.0, 1.5, 3.0, 1.0]).map_err(err)?,
            noise_var: 0.2,
            phi: Nonlinearity::Identity,
            mc_samples: 8,
            seed,
        };
        let layers: Vec<GaussianLayer> = (0..2)
            .map(|_| GaussianLayer {
                mean: DVector::zeros(p),
                factor: normal_matrix(&mut rng, p, p) * 0.5 + DMatrix::identity(p, p),
            })
            .collect();
        let v = vdkm_objective_gaussian(&layers, &problem).map_err(err)?;
        let full = Problem::new(
            problem.g0.clone(),
            problem.y.clone(),
            problem.kernels.clone(),
            problem.widths.clone(),
            problem.noise_var,
        )
        .map_err(err)?
        .evaluate(&raw(&v.induced_grams), ObjectiveKind::Dkm)
        .map_err(err)?
        .value;
        let d = (v.value - full).abs();
        worst_eq = worst_eq.max(d);
        ensure(
            d < 1e-8,
            format!("identity instance {seed}: differs by {d:.2e}"),
        )?;
    }

    // √2·relu on one datapoint, where the exact KL to the feasible set is known.
    let mut worst_z = f64::NEG_INFINITY;
    for draw in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + draw);
        let layers: Vec<GaussianLayer> = (0..2)
            .map(|_| GaussianLayer {
                mean: DVector::from_element(1, rng.random_range(-1.0..1.0)),
                factor: DMatrix::from_element(1, 1, rng.random_range(0.3..1.5)),
            })
            .collect();
        let g0 = GramMatrix::new(DMatrix::from_element(1, 1, rng.random_range(0.5..2.0)))
            .map_err(err)?;
        let y = RegressionTargets::new(DMatrix::from_element(1, 1, rng.random_range(-1.0..1.0)))
            .map_err(err)?;
        let mut gaps = Vec::new();
        for mc_seed in 0..10u64 {
            let problem = VdkmProblem {
                g0: g0.clone(),
                y: y.clone(),
                kernels: vec![KernelSpec::Linear; 3],
                widths: WidthProfile::new(vec![1.0, 2.0, 1.0, 1.0]).map_err(err)?,
                noise_var: 0.3,
                phi: Nonlinearity::ScaledRelu,
                mc_samples: 64,
                seed: 1000 * draw + mc_seed,
            };
            let v = vdkm_objective_gaussian(&layers, &problem).map_err(err)?;
            let induced: Vec<f64> = v.induced_grams.iter().map(|g| g.matrix()[(0, 0)]).collect();
            let exact = relu_dkm_objective_scalar(&problem, &induced).map_err(err)?;
            gaps.push(v.value - exact);
        }
        let n = gaps.len() as f64;
        let mean = gaps.iter().sum::<f64>() / n;
        let sd = (gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let se = sd / n.sqrt();
        let z = if se > 0.0 {
            mean / se
        } else if mean > 0.0 {
            f64::INFINITY
        } else {
            f64::NEG_INFINITY
        };
        worst_z = worst_z.max(z);
        ensure(
            mean <= 3.0 * se,
            format!("draw {draw}: bound exceeds objective by {mean:.3e} ({z:.2} SE)"),
        )?;
    }
    Ok(format!(
        "identity max difference {worst_eq:.1e}; relu worst excess {worst_z:.2} SE over 20 draws"
    ))
}

fn main() {
    let criteria: Vec<(u32, &str, fn() -> Outcome)> = vec![
        (1, "linear-oracle convergence", linear_oracle_convergence),
        (2, "general-width oracle", general_width_oracle),
        (3, "standard-limit recovery", standard_limit_recovery),
        (4, "gradient correctness", gradient_correctness),
        (5, "kernel/nonlinearity consistency", kernel_consistency),
        (6, "Wishart-limit convergence", wishart_limit),
        (7, "sparse = full equivalence", sparse_full_equivalence),
        (8, "width convergence", width_convergence),
        (9, "posterior-shape proxy", posterior_shape),
        (10, "inducing-point RMSE ordering", table_ordering),
        (11, "unimodality", unimodality),
        (12, "MAP vs DKM distinctness", map_vs_dkm),
        (13, "variational bound", vdkm_bound),
    ];
    let only: Option<Vec<u32>> = std::env::var("DKM_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let mut failed = 0;
    for (n, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n}: PASS {name} [{secs:.1}s] {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n}: FAIL {name} [{secs:.1}s] {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
