//! Finite-width deep Gaussian processes: prior sampling, Langevin posterior
//! sampling in white-noise coordinates, MAP training over features, and the
//! Gaussian variational objective with Monte-Carlo Gram matrices.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, DkmError, Result};
use crate::gram::{FeatureMatrix, GramMatrix, WidthProfile};
use crate::kernels::{leaky_relu_derivative, leaky_relu_pointwise, KernelSpec};
use crate::linalg::{symmetrize, Chol};
use crate::objective::{log_lik_and_grad, ObjectiveKind, Problem, RegressionTargets};
use crate::optimizer::{optimize, FactorParams, OptimizerConfig, Trace};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgpConfig {
    /// Hidden layer widths `N_1 … N_L`.
    pub widths: Vec<usize>,
    /// `L + 1` kernels, the last one for the output layer.
    pub kernels: Vec<KernelSpec>,
    pub noise_var: f64,
    pub step_size: f64,
    pub chains: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub samples_per_chain: usize,
    /// Width ratio of the first hidden layer; the log-likelihood is multiplied
    /// by `N_1 / nu`, the number of output replications.
    pub nu: f64,
    pub seed: u64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        DgpConfig {
            widths: vec![32],
            kernels: vec![KernelSpec::sqexp(1.0), KernelSpec::sqexp(1.0)],
            noise_var: 0.1,
            step_size: 1e-3,
            chains: 10,
            burn_in: 10_000,
            thin: 100,
            samples_per_chain: 100,
            nu: 5.0,
            seed: 0,
        }
    }
}

impl DgpConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(DkmError::Config(m));
        if self.widths.is_empty() || self.widths.contains(&0) {
            return fail("widths must be a non-empty list of positive integers".into());
        }
        if self.kernels.len() != self.widths.len() + 1 {
            return fail(format!(
                "{} kernels for {} hidden layers; need one more than the layer count",
                self.kernels.len(),
                self.widths.len()
            ));
        }
        for k in &self.kernels {
            k.validate()?;
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return fail(format!(
                "step_size must be positive, got {}",
                self.step_size
            ));
        }
        if !(self.noise_var >= 0.0 && self.noise_var.is_finite()) {
            return fail(format!(
                "noise_var must be non-negative, got {}",
                self.noise_var
            ));
        }
        if self.chains == 0 || self.thin == 0 {
            return fail("chains and thin must be positive".into());
        }
        if !(self.nu > 0.0 && self.nu.is_finite()) {
            return fail(format!("nu must be positive, got {}", self.nu));
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.widths.len()
    }

    /// `N = N_1 / ν_1`.
    pub fn likelihood_multiplier(&self) -> f64 {
        self.widths[0] as f64 / self.nu
    }

    /// Width ratios `ν_ℓ = N_ℓ / N` of the matching infinite-width objective.
    pub fn width_profile(&self, input_dim: usize, n_outputs: usize) -> Result<WidthProfile> {
        let n = self.likelihood_multiplier();
        let mut nus = Vec::with_capacity(self.depth() + 2);
        nus.push(input_dim as f64);
        nus.extend(self.widths.iter().map(|w| *w as f64 / n));
        nus.push(n_outputs as f64);
        WidthProfile::new(nus)
    }
}

/// Standard-normal coordinates `V_ℓ` with `F_ℓ = chol(K(G_{ℓ-1})) V_ℓ`.
#[derive(Clone, Debug, PartialEq)]
pub struct WhiteNoiseState {
    pub layers: Vec<DMatrix<f64>>,
}

impl WhiteNoiseState {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, p: usize, widths: &[usize]) -> Self {
        let layers = widths
            .iter()
            .map(|&n| DMatrix::from_fn(p, n, |_, _| rng.sample::<f64, _>(StandardNormal)))
            .collect();
        WhiteNoiseState { layers }
    }

    pub fn features(&self, g0: &GramMatrix, kernels: &[KernelSpec]) -> Result<Vec<FeatureMatrix>> {
        let fwd = Forward::new(self, g0, kernels)?;
        fwd.chols
            .iter()
            .zip(&self.layers)
            .map(|(c, v)| FeatureMatrix::new(c.l() * v))
            .collect()
    }

    pub fn grams(&self, g0: &GramMatrix, kernels: &[KernelSpec]) -> Result<Vec<GramMatrix>> {
        let fwd = Forward::new(self, g0, kernels)?;
        Ok(fwd
            .grams
            .into_iter()
            .map(GramMatrix::from_trusted)
            .collect())
    }
}

struct Forward {
    /// `chol(K(G_{ℓ-1}))` for `ℓ = 1 … L`.
    chols: Vec<Chol>,
    /// `V_ℓ V_ℓᵀ / N_ℓ`.
    inner: Vec<DMatrix<f64>>,
    /// `G_1 … G_L`.
    grams: Vec<DMatrix<f64>>,
}

impl Forward {
    fn new(state: &WhiteNoiseState, g0: &GramMatrix, kernels: &[KernelSpec]) -> Result<Self> {
        let depth = state.layers.len();
        if kernels.len() < depth {
            return Err(invalid("fewer kernels than layers"));
        }
        let mut prev = g0.matrix().clone();
        let mut chols = Vec::with_capacity(depth);
        let mut inner = Vec::with_capacity(depth);
        let mut grams = Vec::with_capacity(depth);
        for (l, v) in state.layers.iter().enumerate() {
            if v.nrows() != g0.p() {
                return Err(invalid(format!(
                    "layer {} has {} rows, expected {}",
                    l + 1,
                    v.nrows(),
                    g0.p()
                )));
            }
            let k = kernels[l].apply_raw(&prev)?;
            let c = Chol::named(&k, &format!("K(G_{l}) in the finite-width model"))?;
            let w = symmetrize(&(v * v.transpose() / v.ncols() as f64));
            let g = symmetrize(&(c.l() * &w * c.l().transpose()));
            chols.push(c);
            inner.push(w);
            prev = g.clone();
            grams.push(g);
        }
        Ok(Forward {
            chols,
            inner,
            grams,
        })
    }
}

/// Gradient of a scalar through `Σ = L Lᵀ`: given `∂/∂L` (only the lower
/// triangle is read) returns the symmetric `∂/∂Σ`.
pub fn chol_vjp(l: &DMatrix<f64>, l_bar: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let mut phi = l.transpose() * l_bar.lower_triangle();
    for j in 0..n {
        for i in 0..j {
            phi[(i, j)] = 0.0;
        }
        phi[(j, j)] *= 0.5;
    }
    // L⁻ᵀ Φ L⁻¹.
    let mut x = phi;
    l.tr_solve_lower_triangular_unchecked_mut(&mut x);
    let mut xt = x.transpose();
    l.tr_solve_lower_triangular_unchecked_mut(&mut xt);
    symmetrize(&xt.transpose())
}

/// Log joint `Σ_ℓ log N(vec V_ℓ; 0, I) + N·log P(Y | G_L)` and its gradient.
pub fn log_joint_and_grad(
    state: &WhiteNoiseState,
    g0: &GramMatrix,
    y: &RegressionTargets,
    config: &DgpConfig,
) -> Result<(f64, Vec<DMatrix<f64>>)> {
    let fwd = Forward::new(state, g0, &config.kernels)?;
    let depth = state.layers.len();
    let mult = config.likelihood_multiplier();
    let top = &fwd.grams[depth - 1];
    let (ll, c_bar) = log_lik_and_grad(y.y(), top, &config.kernels[depth], config.noise_var, true)?;
    let mut value = mult * ll;
    let mut grads = Vec::with_capacity(depth);
    let mut g_bar = config.kernels[depth].vjp(top, &(c_bar * mult));
    for l in (0..depth).rev() {
        let v = &state.layers[l];
        value -= 0.5 * v.norm_squared() + 0.5 * v.len() as f64 * (2.0 * std::f64::consts::PI).ln();
        let gs = &g_bar + g_bar.transpose();
        let lo = fwd.chols[l].l();
        let m = lo.transpose() * &gs * lo;
        let mut v_bar = m * v / v.ncols() as f64;
        v_bar -= v;
        grads.push(v_bar);
        if l > 0 {
            let l_bar = &gs * lo * &fwd.inner[l];
            let k_bar = chol_vjp(lo, &l_bar);
            g_bar = config.kernels[l].vjp(&fwd.grams[l - 1], &k_bar);
        }
    }
    grads.reverse();
    Ok((value, grads))
}

/// Draws features layer by layer from the finite-width prior.
pub fn dgp_sample_prior(
    g0: &GramMatrix,
    config: &DgpConfig,
    seed: u64,
) -> Result<Vec<FeatureMatrix>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    WhiteNoiseState::sample(&mut rng, g0.p(), &config.widths).features(g0, &config.kernels)
}

fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64 + 1);
    rng
}

/// Runs one chain, calling `visit` on every retained sample with its log joint.
fn run_chain(
    chain: usize,
    g0: &GramMatrix,
    y: &RegressionTargets,
    config: &DgpConfig,
    mut visit: impl FnMut(&WhiteNoiseState, f64) -> Result<()>,
) -> Result<()> {
    let mut rng = chain_rng(config.seed, chain);
    let mut state = WhiteNoiseState::sample(&mut rng, g0.p(), &config.widths);
    let total = config.burn_in + config.thin * config.samples_per_chain;
    let eps = config.step_size;
    let noise = eps.sqrt();
    for step in 0..total {
        let (value, grads) = log_joint_and_grad(&state, g0, y, config).map_err(|e| match e {
            DkmError::Factorization { what, jitter } => DkmError::Factorization {
                what: format!("{what} (chain {chain}, step {step})"),
                jitter,
            },
            other => other,
        })?;
        if !value.is_finite() || value.abs() > 1e12 {
            return Err(DkmError::Diverged { chain, step, value });
        }
        if step >= config.burn_in && (step - config.burn_in).is_multiple_of(config.thin) {
            visit(&state, value)?;
        }
        for (v, g) in state.layers.iter_mut().zip(&grads) {
            for (x, d) in v.iter_mut().zip(g.iter()) {
                *x += 0.5 * eps * d + noise * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    Ok(())
}

/// Unadjusted Langevin sampling of the white-noise coordinates. Returns the
/// retained samples of each chain; chains run in parallel and each has its
/// own stream derived from `config.seed`.
pub fn langevin_posterior(
    g0: &GramMatrix,
    y: &RegressionTargets,
    config: &DgpConfig,
) -> Result<Vec<Vec<WhiteNoiseState>>> {
    config.validate()?;
    check_data(g0, y)?;
    (0..config.chains)
        .into_par_iter()
        .map(|chain| {
            let mut samples = Vec::with_capacity(config.samples_per_chain);
            run_chain(chain, g0, y, config, |s, _| {
                samples.push(s.clone());
                Ok(())
            })?;
            Ok(samples)
        })
        .collect()
}

/// Pooled statistics of a Langevin run, without keeping the samples.
#[derive(Clone, Debug)]
pub struct LangevinSummary {
    /// Posterior Gram estimate per layer, pooled over chains.
    pub grams: Vec<GramMatrix>,
    /// Per-chain Gram estimates, `[chain][layer]`.
    pub chain_grams: Vec<Vec<GramMatrix>>,
    /// Feature values at one input point, pooled over samples and features, per layer.
    pub marginals: Vec<Vec<f64>>,
    /// Log joint at each retained sample, per chain.
    pub log_joint: Vec<Vec<f64>>,
}

pub fn langevin_summary(
    g0: &GramMatrix,
    y: &RegressionTargets,
    config: &DgpConfig,
    marginal_point: usize,
) -> Result<LangevinSummary> {
    config.validate()?;
    check_data(g0, y)?;
    if marginal_point >= g0.p() {
        return Err(invalid(format!(
            "marginal point {marginal_point} out of range"
        )));
    }
    if config.samples_per_chain == 0 {
        return Err(invalid(
            "a summary needs at least one retained sample per chain",
        ));
    }
    let depth = config.depth();
    let per_chain: Vec<(Vec<DMatrix<f64>>, Vec<Vec<f64>>, Vec<f64>)> = (0..config.chains)
        .into_par_iter()
        .map(|chain| {
            let p = g0.p();
            let mut sums = vec![DMatrix::zeros(p, p); depth];
            let mut marg = vec![Vec::new(); depth];
            let mut lj = Vec::with_capacity(config.samples_per_chain);
            run_chain(chain, g0, y, config, |s, value| {
                let fwd = Forward::new(s, g0, &config.kernels)?;
                for l in 0..depth {
                    sums[l] += &fwd.grams[l];
                    let row = fwd.chols[l].l().row(marginal_point) * &s.layers[l];
                    marg[l].extend(row.iter());
                }
                lj.push(value);
                Ok(())
            })?;
            let n = config.samples_per_chain as f64;
            Ok((sums.into_iter().map(|m| m / n).collect(), marg, lj))
        })
        .collect::<Result<_>>()?;
    let mut pooled = vec![DMatrix::zeros(g0.p(), g0.p()); depth];
    let mut marginals = vec![Vec::new(); depth];
    let mut chain_grams = Vec::with_capacity(per_chain.len());
    let mut log_joint = Vec::with_capacity(per_chain.len());
    for (grams, marg, lj) in per_chain {
        for l in 0..depth {
            pooled[l] += &grams[l];
            marginals[l].extend(&marg[l]);
        }
        chain_grams.push(grams.into_iter().map(GramMatrix::from_trusted).collect());
        log_joint.push(lj);
    }
    let chains = config.chains as f64;
    Ok(LangevinSummary {
        grams: pooled
            .into_iter()
            .map(|m| GramMatrix::from_trusted(m / chains))
            .collect(),
        chain_grams,
        marginals,
        log_joint,
    })
}

fn check_data(g0: &GramMatrix, y: &RegressionTargets) -> Result<()> {
    if g0.p() != y.p() {
        return Err(invalid(format!(
            "input Gram has {} points, targets {}",
            g0.p(),
            y.p()
        )));
    }
    Ok(())
}

/// Average of `(1/N_ℓ) F_ℓ F_ℓᵀ` over samples; `layer` counts from 1.
pub fn posterior_gram_estimate(samples: &[Vec<FeatureMatrix>], layer: usize) -> Result<GramMatrix> {
    if samples.is_empty() {
        return Err(invalid("no samples"));
    }
    if layer == 0 {
        return Err(invalid("layers count from 1"));
    }
    let mut acc: Option<DMatrix<f64>> = None;
    for s in samples {
        let f = s
            .get(layer - 1)
            .ok_or_else(|| invalid(format!("sample has no layer {layer}")))?
            .matrix();
        let g = f * f.transpose() / f.ncols() as f64;
        match &mut acc {
            Some(a) if a.shape() == g.shape() => *a += g,
            Some(_) => return Err(invalid("samples disagree on the number of points")),
            None => acc = Some(g),
        }
    }
    let acc = acc.expect("non-empty samples");
    Ok(GramMatrix::from_trusted(acc / samples.len() as f64))
}

/// MAP training over features of width `N_ℓ ≥ P`, started from a prior sample.
/// Returns the features and the trace of the objective divided by `N`.
pub fn map_features_train(
    g0: &GramMatrix,
    y: &RegressionTargets,
    dgp: &DgpConfig,
    optimizer: &OptimizerConfig,
) -> Result<(Vec<FeatureMatrix>, Trace)> {
    dgp.validate()?;
    check_data(g0, y)?;
    if let Some(w) = dgp.widths.iter().find(|w| **w < g0.p()) {
        return Err(invalid(format!(
            "width {w} is below the number of datapoints {}",
            g0.p()
        )));
    }
    let widths = dgp.width_profile(g0.p(), y.n_outputs())?;
    let problem = Problem::new(
        g0.clone(),
        y.clone(),
        dgp.kernels.clone(),
        widths,
        dgp.noise_var,
    )?;
    let init = dgp_sample_prior(g0, dgp, optimizer.seed)?;
    let params = FactorParams::new(init.into_iter().map(FeatureMatrix::into_inner).collect())?;
    let (params, trace) = optimize(params, ObjectiveKind::Map, optimizer, &problem)?;
    let features = params
        .factors
        .into_iter()
        .map(FeatureMatrix::new)
        .collect::<Result<_>>()?;
    Ok((features, trace))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Nonlinearity {
    Identity,
    /// `√2·relu`, whose kernel is [`KernelSpec::ArcCosRelu`].
    ScaledRelu,
    LeakyRelu {
        p: f64,
    },
}

impl Nonlinearity {
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            Nonlinearity::Identity => x,
            Nonlinearity::ScaledRelu => std::f64::consts::SQRT_2 * x.max(0.0),
            Nonlinearity::LeakyRelu { p } => leaky_relu_pointwise(x, *p),
        }
    }

    pub fn derivative(&self, x: f64) -> f64 {
        match self {
            Nonlinearity::Identity => 1.0,
            Nonlinearity::ScaledRelu => {
                if x > 0.0 {
                    std::f64::consts::SQRT_2
                } else {
                    0.0
                }
            }
            Nonlinearity::LeakyRelu { p } => leaky_relu_derivative(x, *p),
        }
    }
}

fn standard_normals(p: usize, k: usize, seed: u64, stream: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    DMatrix::from_fn(p, k, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// `(1/K) Σ_k φ(f_k) φ(f_k)ᵀ` with `f_k = μ + chol(S) ξ_k`.
pub fn mc_gram_estimate(
    mean: &DVector<f64>,
    cov: &GramMatrix,
    phi: Nonlinearity,
    samples: usize,
    seed: u64,
) -> Result<GramMatrix> {
    if samples == 0 {
        return Err(invalid("need at least one Monte-Carlo sample"));
    }
    if mean.len() != cov.p() {
        return Err(invalid("mean and covariance sizes differ"));
    }
    let c = Chol::named(cov.matrix(), "Monte-Carlo covariance")?;
    let xi = standard_normals(cov.p(), samples, seed, 0);
    Ok(GramMatrix::from_trusted(mc_gram(mean, c.l(), &xi, phi).1))
}

/// Returns the pre-activations and the Gram of their images.
fn mc_gram(
    mean: &DVector<f64>,
    factor: &DMatrix<f64>,
    xi: &DMatrix<f64>,
    phi: Nonlinearity,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut f = factor * xi;
    for mut col in f.column_iter_mut() {
        col += mean;
    }
    let act = f.map(|v| phi.apply(v));
    let g = symmetrize(&(&act * act.transpose() / xi.ncols() as f64));
    (f, g)
}

/// Gaussian approximate posterior over one layer's features, `N(mean, factor factorᵀ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianLayer {
    pub mean: DVector<f64>,
    pub factor: DMatrix<f64>,
}

impl GaussianLayer {
    pub fn cov(&self) -> DMatrix<f64> {
        symmetrize(&(&self.factor * self.factor.transpose()))
    }
}

#[derive(Clone, Debug)]
pub struct VdkmProblem {
    pub g0: GramMatrix,
    pub y: RegressionTargets,
    /// `L + 1` kernels; `Linear` everywhere gives a network whose only
    /// nonlinearity is `phi`.
    pub kernels: Vec<KernelSpec>,
    pub widths: WidthProfile,
    pub noise_var: f64,
    pub phi: Nonlinearity,
    pub mc_samples: usize,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct VdkmValue {
    pub value: f64,
    pub log_lik: f64,
    /// `KL(N(μ_ℓ, S_ℓ) ‖ N(0, K(G̃_{ℓ-1})))`, not scaled by `ν_ℓ`.
    pub kls: Vec<f64>,
    /// `G̃_1 … G̃_L`.
    pub induced_grams: Vec<GramMatrix>,
}

/// `log P(Y | G̃_L) − Σ_ℓ ν_ℓ KL(N(μ_ℓ, S_ℓ) ‖ N(0, K(G̃_{ℓ-1})))` where `G̃_ℓ` is
/// `S_ℓ + μ_ℓμ_ℓᵀ` for the identity and a Monte-Carlo estimate otherwise.
pub fn vdkm_objective_gaussian(
    params: &[GaussianLayer],
    problem: &VdkmProblem,
) -> Result<VdkmValue> {
    vdkm_run(params, problem, false).map(|(v, _)| v)
}

/// Value and reparameterisation gradient with respect to each mean and factor.
pub fn vdkm_gradient(
    params: &[GaussianLayer],
    problem: &VdkmProblem,
) -> Result<(VdkmValue, Vec<GaussianLayer>)> {
    vdkm_run(params, problem, true)
}

struct VdkmLayer {
    chol_k: Chol,
    chol_s: Chol,
    pre: DMatrix<f64>,
    xi: DMatrix<f64>,
}

fn vdkm_run(
    params: &[GaussianLayer],
    problem: &VdkmProblem,
    want_grad: bool,
) -> Result<(VdkmValue, Vec<GaussianLayer>)> {
    let depth = problem.widths.depth();
    let p = problem.g0.p();
    if params.len() != depth || problem.kernels.len() != depth + 1 {
        return Err(invalid(format!(
            "{} layers for a depth-{depth} problem",
            params.len()
        )));
    }
    if params
        .iter()
        .any(|q| q.mean.len() != p || q.factor.shape() != (p, p))
    {
        return Err(invalid(format!(
            "every layer needs a length-{p} mean and a {p}x{p} factor"
        )));
    }
    let mc = problem.phi != Nonlinearity::Identity;
    if mc && problem.mc_samples == 0 {
        return Err(invalid("need at least one Monte-Carlo sample"));
    }
    let mut prev = problem.g0.matrix().clone();
    let mut grams = Vec::with_capacity(depth);
    let mut kls = Vec::with_capacity(depth);
    let mut cache = Vec::with_capacity(depth);
    let mut value = 0.0;
    for (l, q) in params.iter().enumerate() {
        let k = problem.kernels[l].apply_raw(&prev)?;
        let chol_k = Chol::named(&k, &format!("K(G̃_{l})"))?;
        let s = q.cov();
        let chol_s = Chol::named(&s, &format!("S_{}", l + 1))?;
        let kinv_mu = chol_k.solve_vec(&q.mean);
        let kl = 0.5
            * (chol_k.solve(&s).trace() + q.mean.dot(&kinv_mu) - p as f64 + chol_k.log_det()
                - chol_s.log_det());
        let (pre, xi, g) = if mc {
            let xi = standard_normals(p, problem.mc_samples, problem.seed, l as u64);
            let (pre, g) = mc_gram(&q.mean, &q.factor, &xi, problem.phi);
            (pre, xi, g)
        } else {
            let g = symmetrize(&(&s + &q.mean * q.mean.transpose()));
            (DMatrix::zeros(0, 0), DMatrix::zeros(0, 0), g)
        };
        value -= problem.widths.nu(l + 1) * kl;
        kls.push(kl);
        prev = g.clone();
        grams.push(g);
        cache.push(VdkmLayer {
            chol_k,
            chol_s,
            pre,
            xi,
        });
    }
    let top = grams.last().expect("depth ≥ 1");
    let (ll, c_bar) = log_lik_and_grad(
        problem.y.y(),
        top,
        &problem.kernels[depth],
        problem.noise_var,
        want_grad,
    )?;
    value += ll;
    if !value.is_finite() {
        return Err(DkmError::Numerical(format!(
            "variational objective evaluated to {value}"
        )));
    }
    let out = VdkmValue {
        value,
        log_lik: ll,
        kls,
        induced_grams: grams
            .iter()
            .cloned()
            .map(GramMatrix::from_trusted)
            .collect(),
    };
    if !want_grad {
        return Ok((out, Vec::new()));
    }

    let mut grads = vec![
        GaussianLayer {
            mean: DVector::zeros(p),
            factor: DMatrix::zeros(p, p),
        };
        depth
    ];
    let mut g_bar = problem.kernels[depth].vjp(top, &c_bar);
    for l in (0..depth).rev() {
        let q = &params[l];
        let c = &cache[l];
        let gs = &g_bar + g_bar.transpose();
        let (mut mu_bar, mut a_bar) = if mc {
            let act = c.pre.map(|v| problem.phi.apply(v));
            let mut f_bar = &gs * act / c.xi.ncols() as f64;
            f_bar.zip_apply(&c.pre, |fb, x| *fb *= problem.phi.derivative(x));
            let mu_bar = DVector::from_iterator(p, f_bar.row_iter().map(|r| r.sum()));
            (mu_bar, f_bar * c.xi.transpose())
        } else {
            (&gs * &q.mean, &gs * &q.factor)
        };
        let nu = problem.widths.nu(l + 1);
        let kinv = c.chol_k.inverse();
        let sinv = c.chol_s.inverse();
        mu_bar -= &kinv * &q.mean * nu;
        a_bar -= (&kinv - &sinv) * &q.factor * nu;
        grads[l] = GaussianLayer {
            mean: mu_bar,
            factor: a_bar,
        };
        if l > 0 {
            let second = q.cov() + &q.mean * q.mean.transpose();
            let k_bar = (&kinv - &kinv * second * &kinv) * (-0.5 * nu);
            let prev = &grams[l - 1];
            g_bar = problem.kernels[l].vjp(prev, &k_bar);
        }
    }
    Ok((out, grads))
}

/// `KL(Q* ‖ N(0, k))` for the scalar I-projection `Q*` of `N(0, k)` onto
/// `E_Q[φ(f)²] = g` with `φ = √2·relu`. `Q*` keeps the prior's shape on the
/// negative half-line and is a rescaled Gaussian of variance `a` on the
/// positive one.
pub fn relu_projection_kl(g: f64, k: f64) -> Result<f64> {
    if !(g > 0.0 && k > 0.0) {
        return Err(invalid(format!(
            "projection needs positive g and k, got {g}, {k}"
        )));
    }
    let second_moment = |a: f64| 2.0 * a * a.sqrt() / (k.sqrt() + a.sqrt());
    let (mut lo, mut hi) = (-60f64, 60f64);
    if second_moment(lo.exp()) > g || second_moment(hi.exp()) < g {
        return Err(DkmError::Numerical(format!(
            "no projection variance for g = {g:e}"
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if second_moment(mid.exp()) < g {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let a = (0.5 * (lo + hi)).exp();
    let two_pi = 2.0 * std::f64::consts::PI;
    let c = 2.0 / ((two_pi * k).sqrt() + (two_pi * a).sqrt());
    let pos_second = c * a * (two_pi * a).sqrt() / 2.0;
    Ok((c * (two_pi * k).sqrt()).ln() + (0.5 / k - 0.5 / a) * pos_second)
}

/// The deep kernel machine objective for one datapoint with `√2·relu`
/// features, using the exact projection KL at each layer.
pub fn relu_dkm_objective_scalar(problem: &VdkmProblem, grams: &[f64]) -> Result<f64> {
    if problem.g0.p() != 1 || problem.phi != Nonlinearity::ScaledRelu {
        return Err(invalid(
            "the exact projection is only available for one datapoint and √2·relu",
        ));
    }
    let depth = problem.widths.depth();
    if grams.len() != depth {
        return Err(invalid(format!("expected {depth} Gram values")));
    }
    let mut prev = problem.g0.matrix().clone();
    let mut value = 0.0;
    for (l, g) in grams.iter().enumerate() {
        let k = problem.kernels[l].apply_raw(&prev)?[(0, 0)];
        value -= problem.widths.nu(l + 1) * relu_projection_kl(*g, k)?;
        prev = DMatrix::from_element(1, 1, *g);
    }
    let (ll, _) = log_lik_and_grad(
        problem.y.y(),
        &prev,
        &problem.kernels[depth],
        problem.noise_var,
        false,
    )?;
    Ok(value + ll)
}
