//! Factor parameterisation of Gram matrices, initialisation and Adam ascent.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, DkmError, Result};
use crate::gram::GramMatrix;
use crate::kernels::KernelSpec;
use crate::linalg::Chol;
use crate::objective::{ObjectiveKind, ObjectiveTerms, Problem};

/// Gram matrices held as factors, `G_ℓ = (1/n) R_ℓ R_ℓᵀ` where `n` is the
/// number of columns of `R_ℓ` (`P` for the usual square factors, or the layer
/// width when the factors are features).
#[derive(Clone, Debug, PartialEq)]
pub struct FactorParams {
    pub factors: Vec<DMatrix<f64>>,
}

impl FactorParams {
    pub fn new(factors: Vec<DMatrix<f64>>) -> Result<Self> {
        if let Some(p) = factors.first().map(|f| f.nrows()) {
            if factors.iter().any(|f| f.nrows() != p || f.ncols() == 0) {
                return Err(invalid(
                    "factors must share their row count and be non-empty",
                ));
            }
        }
        if factors.iter().any(|f| f.iter().any(|v| !v.is_finite())) {
            return Err(invalid("factors have non-finite entries"));
        }
        Ok(FactorParams { factors })
    }

    pub fn depth(&self) -> usize {
        self.factors.len()
    }

    pub fn grams_raw(&self) -> Vec<DMatrix<f64>> {
        self.factors.iter().map(factor_gram).collect()
    }

    pub fn grams(&self) -> Vec<GramMatrix> {
        self.factors
            .iter()
            .map(|f| GramMatrix::from_trusted(factor_gram(f)))
            .collect()
    }
}

fn factor_gram(r: &DMatrix<f64>) -> DMatrix<f64> {
    r * r.transpose() / r.ncols() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EarlyStop {
    pub tolerance: f64,
    pub window: usize,
}

impl Default for EarlyStop {
    fn default() -> Self {
        EarlyStop {
            tolerance: 1e-9,
            window: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Stop once the objective moves less than `tolerance` over `window` steps.
    pub early_stop: Option<EarlyStop>,
    /// When set, the learning rate decays geometrically to this value over the
    /// iteration budget.
    pub final_learning_rate: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1e-3,
            iterations: 5000,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            early_stop: None,
            final_learning_rate: None,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DkmError::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0) {
            return bad(format!("beta1 must lie in (0, 1), got {}", self.beta1));
        }
        if !(self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad(format!("beta2 must lie in (0, 1), got {}", self.beta2));
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if let Some(lr) = self.final_learning_rate {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("final_learning_rate must be positive, got {lr}"));
            }
        }
        if let Some(es) = &self.early_stop {
            if es.window == 0 {
                return bad("early_stop.window must be at least 1".into());
            }
        }
        Ok(())
    }

    /// Learning rate used at step `t`.
    pub fn learning_rate_at(&self, t: usize) -> f64 {
        match self.final_learning_rate {
            Some(end) if self.iterations > 1 => {
                let frac = t as f64 / (self.iterations - 1) as f64;
                self.learning_rate * (end / self.learning_rate).powf(frac)
            }
            _ => self.learning_rate,
        }
    }
}

/// Adam moment estimates for one block of parameters. Steps go uphill.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

impl Adam {
    pub fn new(n: usize, config: &OptimizerConfig) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
        }
    }

    pub fn ascend(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        debug_assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] += lr * mhat / (vhat.sqrt() + self.epsilon);
        }
    }
}

/// One row of an objective trace.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub objective: f64,
    pub log_lik: f64,
    pub layer_terms: Vec<f64>,
}

impl TraceRow {
    pub fn from_terms(iteration: usize, t: &ObjectiveTerms) -> Self {
        TraceRow {
            iteration,
            objective: t.value,
            log_lik: t.log_lik,
            layer_terms: t.layer_terms.clone(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trace {
    pub rows: Vec<TraceRow>,
}

impl Trace {
    pub fn objectives(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.objective).collect()
    }

    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }
}

/// Factors `√P·chol(G_ℓ)` at the prior recursion `G_ℓ = K(G_{ℓ-1})`. The
/// kernel list is the full `L+1` list; the output kernel is not used.
pub fn init_prior(g0: &GramMatrix, kernels: &[KernelSpec]) -> Result<FactorParams> {
    let depth = depth_of(kernels)?;
    let p = g0.p() as f64;
    let mut prev = g0.matrix().clone();
    let mut factors = Vec::with_capacity(depth);
    for (l, kernel) in kernels.iter().take(depth).enumerate() {
        let g = kernel.apply_raw(&prev)?;
        let c = Chol::named(&g, &format!("prior G_{}", l + 1))?;
        factors.push(c.l() * p.sqrt());
        prev = g;
    }
    FactorParams::new(factors)
}

/// Random starting point: per layer `V_ℓ = chol(K(G_{ℓ-1})) Ξ D^{1/2}` with
/// standard normal `Ξ` and inverse-Gamma diagonal `D` of variance 100. The
/// inverse-Gamma mean is drawn once from `U[0.5, 3]`.
pub fn init_random_scaled(
    g0: &GramMatrix,
    kernels: &[KernelSpec],
    seed: u64,
) -> Result<FactorParams> {
    let depth = depth_of(kernels)?;
    let p = g0.p();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mean: f64 = rng.random_range(0.5..3.0);
    let var = 100.0;
    let mut prev = g0.matrix().clone();
    let mut factors = Vec::with_capacity(depth);
    for (l, kernel) in kernels.iter().take(depth).enumerate() {
        let k = kernel.apply_raw(&prev)?;
        let c = Chol::named(&k, &format!("K(G_{l}) during random init"))?;
        let mut xi = DMatrix::from_fn(p, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        for j in 0..p {
            let d = sample_inverse_gamma(&mut rng, mean, var)?;
            xi.column_mut(j).scale_mut(d.sqrt());
        }
        let v = c.l() * xi;
        prev = factor_gram(&v);
        factors.push(v);
    }
    FactorParams::new(factors)
}

/// Draws from the inverse-Gamma distribution with the given mean and variance.
pub fn sample_inverse_gamma<R: Rng + ?Sized>(rng: &mut R, mean: f64, var: f64) -> Result<f64> {
    if !(mean > 0.0 && var > 0.0) {
        return Err(invalid(format!(
            "inverse-Gamma needs positive mean and variance, got {mean}, {var}"
        )));
    }
    let shape = mean * mean / var + 2.0;
    let rate = mean * (shape - 1.0);
    let gamma = Gamma::new(shape, 1.0 / rate)
        .map_err(|e| invalid(format!("inverse-Gamma parameters: {e}")))?;
    Ok(1.0 / gamma.sample(rng))
}

fn depth_of(kernels: &[KernelSpec]) -> Result<usize> {
    if kernels.is_empty() {
        return Err(invalid("kernel list must include the output kernel"));
    }
    for k in kernels {
        k.validate()?;
    }
    Ok(kernels.len() - 1)
}

/// Adam ascent of the chosen objective over the factors.
pub fn optimize(
    params: FactorParams,
    objective: ObjectiveKind,
    config: &OptimizerConfig,
    problem: &Problem,
) -> Result<(FactorParams, Trace)> {
    config.validate()?;
    if params.depth() != problem.depth() {
        return Err(invalid(format!(
            "{} factors for a depth-{} problem",
            params.depth(),
            problem.depth()
        )));
    }
    if params.factors.iter().any(|f| f.nrows() != problem.p()) {
        return Err(invalid(
            "factor row count does not match the number of datapoints",
        ));
    }
    let mut params = params;
    let mut adams: Vec<Adam> = params
        .factors
        .iter()
        .map(|f| Adam::new(f.len(), config))
        .collect();
    let mut trace = Trace::default();

    for it in 0..config.iterations {
        let grams = params.grams_raw();
        let (terms, grads) = problem
            .evaluate_with_grad(&grams, objective)
            .map_err(|e| at_iteration(e, it))?;
        if !terms.value.is_finite() {
            return Err(DkmError::NonFinite {
                what: "objective".into(),
                iteration: it,
                layer: None,
            });
        }
        trace.rows.push(TraceRow::from_terms(it, &terms));
        if let Some(es) = &config.early_stop {
            let n = trace.rows.len();
            if n > es.window
                && (trace.rows[n - 1].objective - trace.rows[n - 1 - es.window].objective).abs()
                    < es.tolerance
            {
                return Ok((params, trace));
            }
        }
        let lr = config.learning_rate_at(it);
        for (l, ((r, g_bar), adam)) in params
            .factors
            .iter_mut()
            .zip(&grads)
            .zip(adams.iter_mut())
            .enumerate()
        {
            let r_bar = g_bar * &*r * (2.0 / r.ncols() as f64);
            if r_bar.iter().any(|v| !v.is_finite()) {
                return Err(DkmError::NonFinite {
                    what: "gradient".into(),
                    iteration: it,
                    layer: Some(l + 1),
                });
            }
            adam.ascend(r.as_mut_slice(), r_bar.as_slice(), lr);
        }
    }
    let terms = problem
        .evaluate(&params.grams_raw(), objective)
        .map_err(|e| at_iteration(e, config.iterations))?;
    trace
        .rows
        .push(TraceRow::from_terms(config.iterations, &terms));
    Ok((params, trace))
}

fn at_iteration(e: DkmError, it: usize) -> DkmError {
    match e {
        DkmError::Factorization { what, jitter } => DkmError::Factorization {
            what: format!("{what} (iteration {it})"),
            jitter,
        },
        DkmError::Numerical(m) => DkmError::Numerical(format!("{m} (iteration {it})")),
        other => other,
    }
}
