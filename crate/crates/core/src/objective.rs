//! The deep kernel machine objective, its KL and likelihood pieces, the
//! MAP-over-features objective and the finite-width Wishart density.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{invalid, DkmError, Result};
use crate::gram::{GramMatrix, WidthProfile};
use crate::kernels::KernelSpec;
use crate::linalg::{add_diag, symmetrize, trace_prod, Chol};

/// Regression targets `Y`, one column per output.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionTargets {
    y: DMatrix<f64>,
}

impl RegressionTargets {
    pub fn new(y: DMatrix<f64>) -> Result<Self> {
        if y.nrows() == 0 || y.ncols() == 0 {
            return Err(invalid("targets must be non-empty"));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(invalid("targets have non-finite entries"));
        }
        Ok(RegressionTargets { y })
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn p(&self) -> usize {
        self.y.nrows()
    }

    pub fn n_outputs(&self) -> usize {
        self.y.ncols()
    }

    /// `(1/ν_out) Y Yᵀ`.
    pub fn output_gram(&self) -> GramMatrix {
        GramMatrix::from_trusted(&self.y * self.y.transpose() / self.n_outputs() as f64)
    }
}

/// Gram matrices `G_1 … G_L` with the widths, kernels and noise they live under.
/// `kernels[ℓ-1]` maps `G_{ℓ-1}` to the prior covariance of layer `ℓ`;
/// `kernels[L]` is the output kernel.
#[derive(Clone, Debug)]
pub struct DkmState {
    pub grams: Vec<GramMatrix>,
    pub widths: WidthProfile,
    pub kernels: Vec<KernelSpec>,
    pub noise_var: f64,
}

impl DkmState {
    pub fn new(
        grams: Vec<GramMatrix>,
        widths: WidthProfile,
        kernels: Vec<KernelSpec>,
        noise_var: f64,
    ) -> Result<Self> {
        check_structure(grams.len(), &widths, &kernels, noise_var)?;
        if let Some(p) = grams.first().map(GramMatrix::p) {
            if grams.iter().any(|g| g.p() != p) {
                return Err(invalid("Gram matrices differ in size"));
            }
        }
        Ok(DkmState {
            grams,
            widths,
            kernels,
            noise_var,
        })
    }

    pub fn depth(&self) -> usize {
        self.widths.depth()
    }
}

pub(crate) fn check_structure(
    n_grams: usize,
    widths: &WidthProfile,
    kernels: &[KernelSpec],
    noise_var: f64,
) -> Result<()> {
    let depth = widths.depth();
    if n_grams != depth {
        return Err(invalid(format!(
            "{n_grams} Gram matrices for a depth-{depth} width profile"
        )));
    }
    if kernels.len() != depth + 1 {
        return Err(invalid(format!(
            "{} kernels given, need {} (one per hidden layer plus output)",
            kernels.len(),
            depth + 1
        )));
    }
    for k in kernels {
        k.validate()?;
    }
    if !(noise_var >= 0.0 && noise_var.is_finite()) {
        return Err(invalid(format!(
            "noise variance must be non-negative, got {noise_var}"
        )));
    }
    Ok(())
}

/// Which objective to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    #[default]
    Dkm,
    Map,
}

/// An objective value split into its parts.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveTerms {
    pub value: f64,
    /// Log-likelihood before the likelihood weight is applied.
    pub log_lik: f64,
    /// Per-layer `KL(N(0,G_ℓ) ‖ N(0,K(G_{ℓ-1})))`, or the MAP penalty
    /// `½[log|K| + tr(K⁻¹G_ℓ)]` for the MAP objective. Not yet scaled by `ν_ℓ`.
    pub layer_terms: Vec<f64>,
}

/// A fixed optimisation problem: everything except the hidden Gram matrices.
#[derive(Clone, Debug)]
pub struct Problem {
    pub g0: GramMatrix,
    pub y: RegressionTargets,
    pub kernels: Vec<KernelSpec>,
    pub widths: WidthProfile,
    pub noise_var: f64,
    /// Multiplier on the log-likelihood. Only meant for checking the
    /// zero-likelihood limit; leave at 1 otherwise.
    pub likelihood_weight: f64,
}

impl Problem {
    pub fn new(
        g0: GramMatrix,
        y: RegressionTargets,
        kernels: Vec<KernelSpec>,
        widths: WidthProfile,
        noise_var: f64,
    ) -> Result<Self> {
        check_structure(widths.depth(), &widths, &kernels, noise_var)?;
        if g0.p() != y.p() {
            return Err(invalid(format!(
                "input Gram has {} points but targets have {}",
                g0.p(),
                y.p()
            )));
        }
        Ok(Problem {
            g0,
            y,
            kernels,
            widths,
            noise_var,
            likelihood_weight: 1.0,
        })
    }

    pub fn with_likelihood_weight(mut self, w: f64) -> Self {
        self.likelihood_weight = w;
        self
    }

    pub fn depth(&self) -> usize {
        self.widths.depth()
    }

    pub fn p(&self) -> usize {
        self.g0.p()
    }

    pub fn evaluate(&self, grams: &[DMatrix<f64>], kind: ObjectiveKind) -> Result<ObjectiveTerms> {
        self.run(grams, kind, false).map(|(t, _)| t)
    }

    /// Objective and its gradient with respect to each `G_ℓ` (symmetric).
    pub fn evaluate_with_grad(
        &self,
        grams: &[DMatrix<f64>],
        kind: ObjectiveKind,
    ) -> Result<(ObjectiveTerms, Vec<DMatrix<f64>>)> {
        self.run(grams, kind, true)
    }

    fn run(
        &self,
        grams: &[DMatrix<f64>],
        kind: ObjectiveKind,
        want_grad: bool,
    ) -> Result<(ObjectiveTerms, Vec<DMatrix<f64>>)> {
        let depth = self.depth();
        if grams.len() != depth {
            return Err(invalid(format!(
                "expected {depth} Gram matrices, got {}",
                grams.len()
            )));
        }
        let p = self.p();
        let mut grads: Vec<DMatrix<f64>> = if want_grad {
            vec![DMatrix::zeros(p, p); depth]
        } else {
            Vec::new()
        };
        let mut layer_terms = Vec::with_capacity(depth);
        let mut value = 0.0;

        for l in 1..=depth {
            let prev = if l == 1 {
                self.g0.matrix()
            } else {
                &grams[l - 2]
            };
            let g = &grams[l - 1];
            let nu = self.widths.nu(l);
            let k = self.kernels[l - 1].apply_raw(prev)?;
            let ck = Chol::named(&k, &format!("K(G_{}) at layer {l}", l - 1))?;
            let kinv_g = ck.solve(g);
            let term = match kind {
                ObjectiveKind::Dkm => {
                    let cg = Chol::named(g, &format!("G_{l}"))?;
                    0.5 * (kinv_g.trace() - p as f64 + ck.log_det() - cg.log_det())
                }
                ObjectiveKind::Map => 0.5 * (ck.log_det() + kinv_g.trace()),
            };
            layer_terms.push(term);
            value -= nu * term;

            if want_grad {
                let kinv = ck.inverse();
                // Same pull-back for both objectives: d/dK of tr(K⁻¹G) + log|K|.
                let k_bar = (&kinv - &kinv_g * &kinv) * (-0.5 * nu);
                let g_bar = match kind {
                    ObjectiveKind::Dkm => {
                        let ginv = Chol::named(g, &format!("G_{l}"))?.inverse();
                        (&kinv - ginv) * (-0.5 * nu)
                    }
                    ObjectiveKind::Map => &kinv * (-0.5 * nu),
                };
                grads[l - 1] += g_bar;
                if l >= 2 {
                    grads[l - 2] += self.kernels[l - 1].vjp(prev, &k_bar);
                }
            }
        }

        let mut log_lik = 0.0;
        if self.likelihood_weight != 0.0 {
            let top = if depth == 0 {
                self.g0.matrix()
            } else {
                &grams[depth - 1]
            };
            let (ll, c_bar) = log_lik_and_grad(
                self.y.y(),
                top,
                &self.kernels[depth],
                self.noise_var,
                want_grad,
            )?;
            log_lik = ll;
            value += self.likelihood_weight * ll;
            if want_grad && depth > 0 {
                let c_bar = c_bar * self.likelihood_weight;
                grads[depth - 1] += self.kernels[depth].vjp(top, &c_bar);
            }
        }

        if !value.is_finite() {
            return Err(DkmError::Numerical(format!(
                "objective evaluated to {value}"
            )));
        }
        let grads = grads.iter().map(symmetrize).collect();
        Ok((
            ObjectiveTerms {
                value,
                log_lik,
                layer_terms,
            },
            grads,
        ))
    }
}

/// Log-likelihood of every column of `y` under `N(0, K(G) + σ²I)`, and
/// optionally its gradient with respect to the covariance (full-entry).
pub(crate) fn log_lik_and_grad(
    y: &DMatrix<f64>,
    g: &DMatrix<f64>,
    kernel: &KernelSpec,
    noise_var: f64,
    want_grad: bool,
) -> Result<(f64, DMatrix<f64>)> {
    let p = g.nrows();
    if y.nrows() != p {
        return Err(invalid(format!(
            "targets have {} rows, Gram has {p}",
            y.nrows()
        )));
    }
    let mut c = kernel.apply_raw(g)?;
    add_diag(&mut c, noise_var);
    let cc = Chol::named(&c, "output covariance K(G_L) + σ²I")?;
    let n_out = y.ncols() as f64;
    let alpha = cc.solve(y);
    let quad = y.component_mul(&alpha).sum();
    let ll = -0.5 * quad - 0.5 * n_out * cc.log_det() - 0.5 * n_out * p as f64 * (2.0 * PI).ln();
    let c_bar = if want_grad {
        (&alpha * alpha.transpose() - cc.inverse() * n_out) * 0.5
    } else {
        DMatrix::zeros(0, 0)
    };
    Ok((ll, c_bar))
}

/// `½[tr(K⁻¹G) − P + log|K| − log|G|]`.
pub fn kl_gaussian(g: &GramMatrix, k: &GramMatrix) -> Result<f64> {
    if g.p() != k.p() {
        return Err(invalid(format!("size mismatch: {} vs {}", g.p(), k.p())));
    }
    kl_raw(g.matrix(), k.matrix())
}

pub(crate) fn kl_raw(g: &DMatrix<f64>, k: &DMatrix<f64>) -> Result<f64> {
    let ck = Chol::named(k, "K")?;
    let cg = Chol::named(g, "G")?;
    Ok(0.5 * (ck.solve(g).trace() - g.nrows() as f64 + ck.log_det() - cg.log_det()))
}

/// `Σ_λ log N(y_λ; 0, K(G_L) + σ²I)`.
pub fn log_lik_regression(
    y: &RegressionTargets,
    g_l: &GramMatrix,
    spec: &KernelSpec,
    noise_var: f64,
) -> Result<f64> {
    log_lik_and_grad(y.y(), g_l.matrix(), spec, noise_var, false).map(|(ll, _)| ll)
}

/// The likelihood written as `−ν_out · KL((1/ν_out)YYᵀ ‖ K(G_L) + σ²I)`. It
/// differs from [`log_lik_regression`] by a constant that does not depend on
/// `G_L`. A singular `YYᵀ` is handled by the Cholesky jitter.
pub fn likelihood_as_kl(
    y: &RegressionTargets,
    g_l: &GramMatrix,
    spec: &KernelSpec,
    noise_var: f64,
) -> Result<f64> {
    let mut c = spec.apply_raw(g_l.matrix())?;
    add_diag(&mut c, noise_var);
    let out = y.output_gram();
    Ok(-(y.n_outputs() as f64) * kl_raw(out.matrix(), &c)?)
}

fn state_problem(state: &DkmState, g0: &GramMatrix, y: &RegressionTargets) -> Result<Problem> {
    Problem::new(
        g0.clone(),
        y.clone(),
        state.kernels.clone(),
        state.widths.clone(),
        state.noise_var,
    )
}

fn state_grams(state: &DkmState) -> Vec<DMatrix<f64>> {
    state.grams.iter().map(|g| g.matrix().clone()).collect()
}

pub fn dkm_objective(state: &DkmState, g0: &GramMatrix, y: &RegressionTargets) -> Result<f64> {
    let problem = state_problem(state, g0, y)?;
    Ok(problem
        .evaluate(&state_grams(state), ObjectiveKind::Dkm)?
        .value)
}

pub fn map_objective(state: &DkmState, g0: &GramMatrix, y: &RegressionTargets) -> Result<f64> {
    let problem = state_problem(state, g0, y)?;
    Ok(problem
        .evaluate(&state_grams(state), ObjectiveKind::Map)?
        .value)
}

/// Symmetric gradient of the chosen objective with respect to each `G_ℓ`.
pub fn objective_gradient(
    state: &DkmState,
    g0: &GramMatrix,
    y: &RegressionTargets,
    which: ObjectiveKind,
) -> Result<Vec<DMatrix<f64>>> {
    let problem = state_problem(state, g0, y)?;
    Ok(problem.evaluate_with_grad(&state_grams(state), which)?.1)
}

/// `ln Γ_P(a)`.
pub fn ln_multivariate_gamma(p: usize, a: f64) -> f64 {
    let pf = p as f64;
    pf * (pf - 1.0) / 4.0 * PI.ln()
        + (1..=p)
            .map(|j| ln_gamma(a + (1.0 - j as f64) / 2.0))
            .sum::<f64>()
}

/// Log density of `G` under a Wishart with scale `K/N` and `N` degrees of freedom.
pub fn wishart_logpdf(g: &GramMatrix, k: &GramMatrix, n: usize) -> Result<f64> {
    let p = g.p();
    if k.p() != p {
        return Err(invalid(format!("size mismatch: {p} vs {}", k.p())));
    }
    if n < p {
        return Err(invalid(format!(
            "Wishart needs N ≥ P, got N = {n} < P = {p}"
        )));
    }
    let ck = Chol::named(k.matrix(), "Wishart scale")?;
    let cg = Chol::named(g.matrix(), "Wishart argument")?;
    let (nf, pf) = (n as f64, p as f64);
    let alpha =
        -nf * pf / 2.0 * 2f64.ln() + nf * pf / 2.0 * nf.ln() - ln_multivariate_gamma(p, nf / 2.0);
    Ok((nf - pf - 1.0) / 2.0 * cg.log_det()
        - nf / 2.0 * ck.log_det()
        - nf / 2.0 * trace_prod(&ck.inverse(), g.matrix())
        + alpha)
}

/// `(1/N)·log Wishart(G; K/N, N) + KL(G ‖ K)` for each `N`. With every layer
/// as wide as the replication factor (`ν = 1`) the sequence tends to zero.
pub fn wishart_limit_check(g: &GramMatrix, k: &GramMatrix, n_list: &[usize]) -> Result<Vec<f64>> {
    let kl = kl_gaussian(g, k)?;
    n_list
        .iter()
        .map(|&n| Ok(wishart_logpdf(g, k, n)? / n as f64 + kl))
        .collect()
}
