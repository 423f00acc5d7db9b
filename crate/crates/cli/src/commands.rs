use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dkm::io::{
    read_checkpoint, write_checkpoint, write_columns_csv, write_grams, write_table, write_trace_csv,
};
use dkm::{
    gram_rmse, init_prior, init_random_scaled, input_gram, langevin_summary, linear_equal_width,
    linear_general_width, optimize, predict_marginals, run_split, standardize, subset, Chol,
    Dataset, GramMatrix, KernelSpec, ObjectiveKind, OptimizerConfig, Problem, RegressionTargets,
    SparseMethod, Split, SubsetMode, WidthProfile,
};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{InitKind, RunConfig};
use crate::error::CliError;
use crate::output::{slug, summary_value, write_json, RunDir};

/// Column statistics needed to apply a trained model to raw data.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Standardization {
    pub feature_names: Vec<String>,
    pub feature_means: Vec<f64>,
    pub feature_stds: Vec<f64>,
    pub target_names: Vec<String>,
    pub target_means: Vec<f64>,
    pub target_stds: Vec<f64>,
}

impl Standardization {
    fn of(d: &Dataset) -> Self {
        Standardization {
            feature_names: d.feature_names.clone(),
            feature_means: d.feature_means.clone(),
            feature_stds: d.feature_stds.clone(),
            target_names: d.target_names.clone(),
            target_means: d.target_means.clone(),
            target_stds: d.target_stds.clone(),
        }
    }
}

fn load_dataset(config: &RunConfig, command: &str) -> Result<Dataset, CliError> {
    let Some(dc) = &config.dataset else {
        return Err(CliError::key(
            "dataset",
            format!("{command} needs a [dataset] section"),
        ));
    };
    let source = dc.source();
    let ds = source
        .load()
        .map_err(|e| CliError::key("dataset.path", format!("{}: {e}", source.path.display())))?;
    let Some(n) = dc.subset else {
        return Ok(ds);
    };
    let mode = dc
        .subset_seed
        .map_or(SubsetMode::First, |seed| SubsetMode::Random { seed });
    subset(&ds, n, mode).map_err(|e| CliError::key("dataset.subset", e))
}

/// Every row standardized with its own statistics.
fn standardized_all(ds: &Dataset) -> Result<Dataset, CliError> {
    let all = Split {
        train_indices: (0..ds.len()).collect(),
        test_indices: vec![],
        seed: 0,
        test_per_mille: 0,
    };
    Ok(standardize(ds, &all)?)
}

fn optimizer_for(config: &RunConfig, seed: u64) -> OptimizerConfig {
    OptimizerConfig {
        seed,
        ..config.optimizer.clone()
    }
}

fn run_name(parts: &[&str], seed: u64) -> String {
    let mut name: Vec<String> = parts.iter().map(|p| slug(p)).collect();
    name.push(format!("s{seed}"));
    name.join("-")
}

/// `‖G_ℓ − K(G_{ℓ-1})‖` RMSE per hidden layer.
fn recursion_gaps(
    g0: &GramMatrix,
    grams: &[GramMatrix],
    kernels: &[KernelSpec],
) -> Result<Vec<f64>, CliError> {
    let mut prev = g0;
    let mut gaps = Vec::with_capacity(grams.len());
    for (g, k) in grams.iter().zip(kernels) {
        gaps.push(gram_rmse(g, &k.apply(prev)?)?);
        prev = g;
    }
    Ok(gaps)
}

pub fn train(config: &RunConfig) -> Result<Value, CliError> {
    let start = Instant::now();
    let ds = load_dataset(config, "train")?;
    let std = standardized_all(&ds)?;
    let g0 = input_gram(&std);
    let y = RegressionTargets::new(std.y.clone())?;
    let m = &config.model;
    let kernels = m.kernel_list()?;
    let widths = WidthProfile::uniform(std.x.ncols() as f64, m.nu, m.layers, y.n_outputs() as f64)
        .map_err(|e| CliError::key("model.nu", e))?;
    let problem = Problem::new(g0.clone(), y, kernels.clone(), widths, m.noise_var)
        .map_err(|e| CliError::key("model", e))?
        .with_likelihood_weight(m.likelihood_weight);
    let init = match m.init {
        InitKind::Prior => init_prior(&g0, &kernels)?,
        InitKind::Random => init_random_scaled(&g0, &kernels, config.seed)?,
    };
    let (params, trace) = optimize(
        init,
        m.objective,
        &optimizer_for(config, config.seed),
        &problem,
    )?;
    let grams = params.grams();
    let terms = problem.evaluate(&params.grams_raw(), m.objective)?;

    let dir = RunDir::create(config, &run_name(&["train", &ds.name], config.seed))?;
    write_trace_csv(dir.writer("trace.csv")?, &trace)?;
    write_grams(dir.writer("grams.txt")?, &grams)?;
    dir.summary(
        "train",
        json!({
            "dataset": ds.name,
            "points": ds.len(),
            "layers": m.layers,
            "objective_kind": m.objective,
            "objective": terms.value,
            "log_lik": terms.log_lik,
            "layer_terms": terms.layer_terms,
            "recursion_rmse": recursion_gaps(&g0, &grams, &kernels)?,
            "iterations": trace.rows.len(),
            "seconds": start.elapsed().as_secs_f64(),
            "run_dir": dir.path,
        }),
    )
}

pub fn train_sparse(config: &RunConfig) -> Result<Value, CliError> {
    let ds = load_dataset(config, "train-sparse")?;
    let s = &config.sparse;
    let split = Split::random(ds.len(), s.test_fraction, s.split)
        .map_err(|e| CliError::key("sparse.test_fraction", e))?;
    let setup = s.setup(&optimizer_for(config, config.seed));
    let run = run_split(&ds, &split, s.method, &setup)?;

    let split_name = format!("split{}", s.split);
    let dir = RunDir::create(
        config,
        &run_name(
            &["sparse", &ds.name, s.method.name(), &split_name],
            config.seed,
        ),
    )?;
    write_checkpoint(dir.writer("checkpoint.txt")?, &run.state)?;
    write_trace_csv(dir.writer("trace.csv")?, &run.trace)?;
    write_json(
        &dir.file("standardization.json"),
        &Standardization::of(&run.standardized),
    )?;
    write_json(&dir.file("split.json"), &split)?;
    let mut summary = summary_value("train-sparse", &run.outcome)?;
    summary["run_dir"] = json!(dir.path);
    write_json(&dir.file("summary.json"), &summary)?;
    Ok(summary)
}

pub fn predict(run: &Path, data: &Path, out: Option<&Path>) -> Result<Value, CliError> {
    let open = |name: &str| {
        std::fs::File::open(run.join(name))
            .map_err(|e| CliError::Config(format!("{}: {e}", run.join(name).display())))
    };
    let state = read_checkpoint(std::io::BufReader::new(open("checkpoint.txt")?))?;
    let stats: Standardization =
        serde_json::from_reader(std::io::BufReader::new(open("standardization.json")?))
            .map_err(|e| CliError::Config(format!("standardization.json: {e}")))?;
    let raw = dkm::load_csv(data, &stats.target_names)
        .map_err(|e| CliError::Config(format!("{}: {e}", data.display())))?;
    let cols: Vec<usize> = stats
        .feature_names
        .iter()
        .map(|f| {
            raw.feature_names
                .iter()
                .position(|g| g == f)
                .ok_or_else(|| {
                    CliError::Config(format!("{}: missing input column {f:?}", data.display()))
                })
        })
        .collect::<Result<_, _>>()?;
    let x = DMatrix::from_fn(raw.len(), cols.len(), |i, k| {
        (raw.x[(i, cols[k])] - stats.feature_means[k]) / stats.feature_stds[k]
    });
    let (mean, var) = predict_marginals(&state, &x)?;

    let n_out = stats.target_names.len();
    let mut header = Vec::new();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut sq = 0.0;
    for (j, name) in stats.target_names.iter().enumerate() {
        let (m, s) = (stats.target_means[j], stats.target_stds[j]);
        let pred: Vec<f64> = mean.column(j).iter().map(|v| v * s + m).collect();
        sq += pred
            .iter()
            .zip(raw.y.column(j).iter())
            .map(|(p, t)| (p - t).powi(2))
            .sum::<f64>();
        header.extend([format!("{name}_mean"), format!("{name}_var"), name.clone()]);
        columns.push(pred);
        columns.push(var.iter().map(|v| v * s * s).collect());
        columns.push(raw.y.column(j).iter().copied().collect());
    }
    let rmse = (sq / (raw.len() * n_out) as f64).sqrt();
    let out = out.map_or_else(|| run.join("predictions.csv"), Path::to_path_buf);
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let column_refs: Vec<&[f64]> = columns.iter().map(Vec::as_slice).collect();
    write_columns_csv(
        std::io::BufWriter::new(std::fs::File::create(&out)?),
        &header_refs,
        &column_refs,
    )?;
    let summary = summary_value(
        "predict",
        json!({ "data": data, "rows": raw.len(), "test_rmse": rmse, "predictions": out }),
    )?;
    write_json(&out.with_extension("json"), &summary)?;
    Ok(summary)
}

fn matrix_from_rows(rows: &[Vec<f64>], key: &str) -> Result<GramMatrix, CliError> {
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(CliError::key(key, "must be a non-empty square matrix"));
    }
    GramMatrix::new(DMatrix::from_fn(n, n, |i, j| rows[i][j])).map_err(|e| CliError::key(key, e))
}

pub fn oracle_linear(config: &RunConfig) -> Result<Value, CliError> {
    let start = Instant::now();
    let o = &config.oracle;
    let (g0, gout, label) = match (&o.input_gram, &o.output_gram) {
        (Some(a), Some(b)) => (
            matrix_from_rows(a, "oracle.input_gram")?,
            matrix_from_rows(b, "oracle.output_gram")?,
            "custom".to_string(),
        ),
        (None, None) => {
            let ds = load_dataset(config, "oracle-linear")?;
            let std = standardized_all(&ds)?;
            let y = RegressionTargets::new(std.y.clone())?;
            let mut out = y.output_gram().into_inner();
            let jitter = o.jitter * out.diagonal().mean();
            for i in 0..out.nrows() {
                out[(i, i)] += jitter;
            }
            (input_gram(&std), GramMatrix::new(out)?, ds.name)
        }
        _ => {
            return Err(CliError::key(
                "oracle.output_gram",
                "give both input_gram and output_gram, or neither",
            ))
        }
    };
    if g0.p() != gout.p() {
        return Err(CliError::key(
            "oracle.output_gram",
            format!("is {0}x{0} but the input Gram is {1}x{1}", gout.p(), g0.p()),
        ));
    }
    let p = g0.p();
    let nus = match &o.nus {
        Some(v) => v.clone(),
        None => vec![1.0; o.layers + 1],
    };
    if nus.len() < 2 {
        return Err(CliError::key(
            "oracle.nus",
            "needs ν_1 … ν_{L+1} with at least one hidden layer",
        ));
    }
    let depth = nus.len() - 1;
    let solution = if nus.iter().all(|v| *v == nus[0]) {
        linear_equal_width(&g0, &gout, depth)?
    } else {
        linear_general_width(&g0, &gout, &nus).map_err(|e| CliError::key("oracle.nus", e))?
    };

    let dir = RunDir::create(config, &run_name(&["oracle-linear", &label], config.seed))?;
    write_grams(dir.writer("grams_oracle.txt")?, &solution.grams)?;
    let mut fields = json!({
        "input": label,
        "points": p,
        "layers": depth,
        "nus": nus,
        "run_dir": dir.path,
    });
    if o.optimize {
        // Only ratios matter at the optimum, so rescale so that ν_{L+1} = P
        // and targets Y with YYᵀ/P equal to the output Gram.
        let scale = p as f64 / nus[depth];
        let mut profile = vec![1.0];
        profile.extend(nus.iter().map(|v| v * scale));
        let y = Chol::new(gout.matrix())?.l() * (p as f64).sqrt();
        let kernels = vec![KernelSpec::Linear; depth + 1];
        let problem = Problem::new(
            g0.clone(),
            RegressionTargets::new(y)?,
            kernels.clone(),
            WidthProfile::new(profile)?,
            0.0,
        )?;
        let (params, trace) = optimize(
            init_prior(&g0, &kernels)?,
            ObjectiveKind::Dkm,
            &optimizer_for(config, config.seed),
            &problem,
        )?;
        let grams = params.grams();
        let rmse: Vec<f64> = grams
            .iter()
            .zip(&solution.grams)
            .map(|(a, b)| gram_rmse(a, b))
            .collect::<Result<_, _>>()?;
        let rel: Vec<f64> = grams
            .iter()
            .zip(&solution.grams)
            .map(|(a, b)| dkm::linalg::rel_frobenius(a.matrix(), b.matrix()))
            .collect();
        write_grams(dir.writer("grams_optimized.txt")?, &grams)?;
        write_trace_csv(dir.writer("trace.csv")?, &trace)?;
        fields["gram_rmse"] = json!(rmse);
        fields["relative_frobenius"] = json!(rel);
    }
    fields["seconds"] = json!(start.elapsed().as_secs_f64());
    dir.summary("oracle-linear", fields)
}

pub fn validate_langevin(config: &RunConfig) -> Result<Value, CliError> {
    let start = Instant::now();
    let ds = load_dataset(config, "validate-langevin")?;
    let std = standardized_all(&ds)?;
    let g0 = input_gram(&std);
    let y = RegressionTargets::new(std.y.clone())?;
    let l = &config.langevin;
    if l.widths.is_empty() {
        return Err(CliError::key("langevin.widths", "needs at least one width"));
    }
    let m = &config.model;
    let base = l.dgp(l.widths[0], m, config.seed)?;
    // With equal hidden widths the matching ratios do not depend on the width.
    let profile = base.width_profile(std.x.ncols(), y.n_outputs())?;
    let problem = Problem::new(
        g0.clone(),
        y.clone(),
        base.kernels.clone(),
        profile,
        m.noise_var,
    )?;
    let (params, _) = optimize(
        init_prior(&g0, &base.kernels)?,
        ObjectiveKind::Dkm,
        &optimizer_for(config, config.seed),
        &problem,
    )?;
    let optimum = params.grams();

    let dir = RunDir::create(config, &run_name(&["langevin", &ds.name], config.seed))?;
    write_grams(dir.writer("grams_dkm.txt")?, &optimum)?;
    let mut rows = Vec::new();
    let mut curve = Vec::new();
    for &width in &l.widths {
        let dgp = l.dgp(width, m, config.seed)?;
        let summary = langevin_summary(&g0, &y, &dgp, l.marginal_point)?;
        let mut per_layer = Vec::new();
        for (layer, (g, opt)) in summary.grams.iter().zip(&optimum).enumerate() {
            let rmse = gram_rmse(g, opt)?;
            rows.push(vec![
                width.to_string(),
                (layer + 1).to_string(),
                rmse.to_string(),
            ]);
            per_layer.push(rmse);
        }
        write_grams(
            dir.writer(&format!("grams_langevin_w{width}.txt"))?,
            &summary.grams,
        )?;
        let cols: Vec<&[f64]> = summary.marginals.iter().map(Vec::as_slice).collect();
        let names: Vec<String> = (1..=cols.len()).map(|k| format!("layer{k}")).collect();
        let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
        write_columns_csv(
            dir.writer(&format!("marginals_w{width}.csv"))?,
            &name_refs,
            &cols,
        )?;
        curve.push(json!({ "width": width, "gram_rmse": per_layer }));
    }
    write_table(
        dir.writer("width_rmse.csv")?,
        &["width", "layer", "gram_rmse"],
        &rows,
    )?;
    dir.summary(
        "validate-langevin",
        json!({
            "dataset": ds.name,
            "points": ds.len(),
            "curve": curve,
            "seconds": start.elapsed().as_secs_f64(),
            "run_dir": dir.path,
        }),
    )
}

pub fn unimodality(config: &RunConfig) -> Result<Value, CliError> {
    let start = Instant::now();
    let ds = load_dataset(config, "unimodality")?;
    let std = standardized_all(&ds)?;
    let g0 = input_gram(&std);
    let y = RegressionTargets::new(std.y.clone())?;
    let m = &config.model;
    let kernels = m.kernel_list()?;
    let widths = WidthProfile::uniform(std.x.ncols() as f64, m.nu, m.layers, y.n_outputs() as f64)?;
    let problem = Problem::new(g0.clone(), y, kernels.clone(), widths, m.noise_var)?;
    let restarts = config.unimodality.restarts;
    if restarts < 2 {
        return Err(CliError::key(
            "unimodality.restarts",
            "needs at least two restarts to compare",
        ));
    }
    let dir = RunDir::create(config, &run_name(&["unimodality", &ds.name], config.seed))?;
    let mut trace_rows = Vec::new();
    let mut finals = Vec::new();
    let mut solutions = Vec::new();
    for k in 0..restarts {
        let seed = config.seed + k;
        let init = init_random_scaled(&g0, &kernels, seed)?;
        let (params, trace) = optimize(init, m.objective, &optimizer_for(config, seed), &problem)?;
        for r in &trace.rows {
            trace_rows.push(vec![
                k.to_string(),
                r.iteration.to_string(),
                r.objective.to_string(),
            ]);
        }
        finals.push(problem.evaluate(&params.grams_raw(), m.objective)?.value);
        solutions.push(params.grams());
    }
    write_table(
        dir.writer("traces.csv")?,
        &["restart", "iteration", "objective"],
        &trace_rows,
    )?;
    let mut pair_rows = Vec::new();
    let mut worst: f64 = 0.0;
    for a in 0..solutions.len() {
        for b in a + 1..solutions.len() {
            for (layer, (ga, gb)) in solutions[a].iter().zip(&solutions[b]).enumerate() {
                let r = gram_rmse(ga, gb)?;
                worst = worst.max(r);
                pair_rows.push(vec![
                    a.to_string(),
                    b.to_string(),
                    (layer + 1).to_string(),
                    r.to_string(),
                ]);
            }
        }
    }
    write_table(
        dir.writer("pairwise.csv")?,
        &["restart_a", "restart_b", "layer", "gram_rmse"],
        &pair_rows,
    )?;
    let hi = finals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = finals.iter().copied().fold(f64::INFINITY, f64::min);
    dir.summary(
        "unimodality",
        json!({
            "dataset": ds.name,
            "points": ds.len(),
            "final_objectives": finals,
            "objective_spread": hi - lo,
            "max_pairwise_gram_rmse": worst,
            "seconds": start.elapsed().as_secs_f64(),
            "run_dir": dir.path,
        }),
    )
}

fn collect_summaries(path: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    if path.is_file() {
        out.push(path.to_path_buf());
    } else if path.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(path)?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<_, _>>()?;
        entries.sort();
        for e in entries {
            if e.is_dir() {
                collect_summaries(&e, out)?;
            } else if e.file_name().is_some_and(|n| n == "summary.json") {
                out.push(e);
            }
        }
    }
    Ok(())
}

#[derive(Deserialize)]
struct SparseSummary {
    command: String,
    dataset: String,
    method: SparseMethod,
    test_rmse: f64,
}

/// Mean test RMSE and its standard error over splits, per dataset and method.
pub fn report(paths: &[PathBuf], out: Option<&Path>) -> Result<Value, CliError> {
    let mut files = Vec::new();
    for p in paths {
        if !p.exists() {
            return Err(CliError::Config(format!("{} does not exist", p.display())));
        }
        collect_summaries(p, &mut files)?;
    }
    let mut cells: BTreeMap<(String, &'static str), Vec<f64>> = BTreeMap::new();
    for f in &files {
        let text = std::fs::read_to_string(f)?;
        let Ok(s) = serde_json::from_str::<SparseSummary>(&text) else {
            continue;
        };
        if s.command == "train-sparse" {
            cells
                .entry((s.dataset, s.method.name()))
                .or_default()
                .push(s.test_rmse);
        }
    }
    if cells.is_empty() {
        return Err(CliError::Config("no train-sparse summaries found".into()));
    }
    let stats = |v: &[f64]| {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let se = if v.len() > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
        } else {
            f64::NAN
        };
        (mean, se)
    };
    let datasets: Vec<String> = cells
        .keys()
        .map(|(d, _)| d.clone())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let methods = SparseMethod::ALL.map(|m| m.name());
    let mut md = String::from("| dataset | NNGP | MAP | DKM |\n|---|---|---|---|\n");
    let mut rows = Vec::new();
    let mut records = Vec::new();
    for d in &datasets {
        md.push_str(&format!("| {d} |"));
        for m in methods {
            match cells.get(&(d.clone(), m)) {
                Some(v) => {
                    let (mean, se) = stats(v);
                    md.push_str(&format!(" {mean:.3} ± {se:.3} ({}) |", v.len()));
                    rows.push(vec![
                        d.clone(),
                        m.to_string(),
                        v.len().to_string(),
                        mean.to_string(),
                        se.to_string(),
                    ]);
                    records.push(json!({ "dataset": d, "method": m, "splits": v.len(), "mean_rmse": mean, "stderr_rmse": se }));
                }
                None => md.push_str(" - |"),
            }
        }
        md.push('\n');
    }
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join("table.md"), &md)?;
            write_table(
                std::io::BufWriter::new(std::fs::File::create(dir.join("table.csv"))?),
                &["dataset", "method", "splits", "mean_rmse", "stderr_rmse"],
                &rows,
            )?;
        }
        None => print!("{md}"),
    }
    summary_value(
        "report",
        json!({ "summaries": files.len(), "cells": records }),
    )
}
