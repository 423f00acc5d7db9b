//! Inducing-point deep kernel machine: Gram propagation to train/test points,
//! the sparse objective with analytic gradients, prediction and training.
//!
//! Learned Gram matrices live on `P_i` inducing points. Any other point is
//! attached layer by layer through the conditional Gaussian formulas
//! `G_ti = K_ti K_ii⁻¹ G_ii` and
//! `G_tt = K_ti K_ii⁻¹ G_ii K_ii⁻¹ K_it + K_tt − K_ti K_ii⁻¹ K_it`,
//! so cost is linear in the number of propagated points.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::select_rows;
use crate::error::{invalid, DkmError, Result};
use crate::gram::{GramMatrix, WidthProfile};
use crate::kernels::{GramBlocks, KernelSpec, TtBlock};
use crate::linalg::{add_diag, symmetrize, Chol};
use crate::objective::{check_structure, ObjectiveKind};
use crate::optimizer::{Adam, OptimizerConfig, Trace, TraceRow};

/// Argument order of the per-layer KL in the sparse objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KlOrder {
    /// `KL(N(0, G_ii^ℓ) ‖ N(0, K(G_ii^{ℓ-1})))`, matching the full objective.
    #[default]
    PosteriorFirst,
    /// Arguments swapped; kept for ablations.
    PriorFirst,
}

/// How the output layer's inducing values enter the objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OutputMode {
    /// `F_i` is a free parameter and the fit term is `Σ log N(y; K_ti K_ii⁻¹ F_i, σ²)`.
    #[default]
    Learned,
    /// `F_i` is integrated out under its optimal Gaussian, giving the fit term
    /// `log N(Y; 0, K_ti K_ii⁻¹ K_it + σ²I)`. `F_i` is then the projected mean.
    /// Needs the full batch.
    Collapsed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparseState {
    /// `P_i × ν_0`.
    pub inducing_inputs: DMatrix<f64>,
    /// `G_ii^1 … G_ii^L`.
    pub inducing_grams: Vec<GramMatrix>,
    /// `P_i × ν_out` learned outputs at the inducing points.
    pub inducing_outputs: DMatrix<f64>,
    pub kernels: Vec<KernelSpec>,
    pub widths: WidthProfile,
    pub noise_var: f64,
}

impl SparseState {
    pub fn new(
        inducing_inputs: DMatrix<f64>,
        inducing_grams: Vec<GramMatrix>,
        inducing_outputs: DMatrix<f64>,
        kernels: Vec<KernelSpec>,
        widths: WidthProfile,
        noise_var: f64,
    ) -> Result<Self> {
        check_structure(inducing_grams.len(), &widths, &kernels, noise_var)?;
        let pi = inducing_inputs.nrows();
        if pi == 0 || inducing_inputs.ncols() == 0 {
            return Err(invalid(
                "need at least one inducing point with at least one input",
            ));
        }
        if inducing_grams.iter().any(|g| g.p() != pi) {
            return Err(invalid(format!("inducing Gram matrices must be {pi}x{pi}")));
        }
        if inducing_outputs.nrows() != pi || inducing_outputs.ncols() == 0 {
            return Err(invalid(format!(
                "inducing outputs must have {pi} rows and at least one column"
            )));
        }
        Ok(SparseState {
            inducing_inputs,
            inducing_grams,
            inducing_outputs,
            kernels,
            widths,
            noise_var,
        })
    }

    /// Inducing Gram matrices at the prior recursion `G_ii^ℓ = K(G_ii^{ℓ-1})`.
    pub fn prior_grams(
        x_i: &DMatrix<f64>,
        kernels: &[KernelSpec],
        depth: usize,
    ) -> Result<Vec<GramMatrix>> {
        let mut g = gram_of_inputs(x_i);
        let mut out = Vec::with_capacity(depth);
        for kernel in kernels.iter().take(depth) {
            g = kernel.apply_raw(&g)?;
            out.push(GramMatrix::from_trusted(g.clone()));
        }
        Ok(out)
    }

    /// Initial state: the given inducing inputs, Gram matrices at the prior
    /// recursion and outputs at the projected-process posterior mean
    /// `K_ii (σ²K_ii + K_it K_ti)⁻¹ K_it Y` given the training data.
    pub fn initialize(
        inducing_inputs: DMatrix<f64>,
        x: &DMatrix<f64>,
        y: &DMatrix<f64>,
        kernels: Vec<KernelSpec>,
        widths: WidthProfile,
        noise_var: f64,
    ) -> Result<Self> {
        let depth = widths.depth();
        let grams = Self::prior_grams(&inducing_inputs, &kernels, depth)?;
        let outputs = DMatrix::zeros(inducing_inputs.nrows(), y.ncols());
        let mut state =
            SparseState::new(inducing_inputs, grams, outputs, kernels, widths, noise_var)?;
        state.inducing_outputs = state.projected_outputs(x, y)?;
        Ok(state)
    }

    /// `K_ii (σ²K_ii + K_it K_ti)⁻¹ K_it Y` under the current Gram matrices.
    pub fn projected_outputs(&self, x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.nrows() != y.nrows() || y.ncols() != self.inducing_outputs.ncols() {
            return Err(invalid(
                "training inputs and targets do not match the state",
            ));
        }
        if self.noise_var <= 0.0 {
            return Err(DkmError::Config(
                "projected outputs need a positive noise variance".into(),
            ));
        }
        let model = Model::from_state(self);
        let fwd = model.forward(x, false)?;
        let out = fwd.output();
        let mut m = &out.kb.ii * self.noise_var + out.kb.ti.transpose() * &out.kb.ti;
        m = symmetrize(&m);
        let cm = Chol::named(&m, "σ²K_ii + K_it K_ti")?;
        Ok(&out.kb.ii * cm.solve(&(out.kb.ti.transpose() * y)))
    }

    pub fn depth(&self) -> usize {
        self.widths.depth()
    }

    pub fn n_inducing(&self) -> usize {
        self.inducing_inputs.nrows()
    }
}

fn gram_of_inputs(x: &DMatrix<f64>) -> DMatrix<f64> {
    symmetrize(&(x * x.transpose() / x.ncols() as f64))
}

/// Gram blocks of the propagated points at one hidden layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerBlocks {
    /// `P_t × P_i`.
    pub g_ti: DMatrix<f64>,
    pub g_tt: TtBlock,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PropagatedBlocks {
    /// Hidden layers `1 … L`.
    pub layers: Vec<LayerBlocks>,
}

/// Working copy of the parameters: plain matrices plus the current kernel
/// hyperparameters.
#[derive(Clone, Debug)]
struct Model {
    x_i: DMatrix<f64>,
    grams: Vec<DMatrix<f64>>,
    outputs: DMatrix<f64>,
    kernels: Vec<KernelSpec>,
    widths: WidthProfile,
    noise_var: f64,
    /// Gram matrices follow the kernel recursion instead of being free.
    pinned: bool,
    kl_order: KlOrder,
    kind: ObjectiveKind,
    output: OutputMode,
}

/// Cached forward quantities for one layer (hidden or output).
struct LayerCache {
    /// Joint Gram blocks fed into this layer's kernel.
    input: GramBlocks,
    kb: GramBlocks,
    chol_kii: Chol,
    /// `K_ti K_ii⁻¹`.
    a: DMatrix<f64>,
}

struct Forward {
    /// `L + 1` entries: hidden layers then the output layer.
    layers: Vec<LayerCache>,
    /// The Gram matrices actually used (recursion values when pinned).
    grams: Vec<DMatrix<f64>>,
    hidden: Vec<LayerBlocks>,
}

impl Forward {
    fn output(&self) -> &LayerCache {
        self.layers
            .last()
            .expect("forward pass has an output layer")
    }
}

struct SparseGrad {
    grams: Vec<DMatrix<f64>>,
    outputs: DMatrix<f64>,
    hypers: Vec<Vec<f64>>,
    log_noise: f64,
}

/// Value of the sparse objective split into parts.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseTerms {
    pub value: f64,
    /// Scaled `Σ log N(y; m, σ²)` over the batch.
    pub fit: f64,
    /// Scaled `−ν_out Σ v_t / (2σ²)` over the batch.
    pub variance_correction: f64,
    /// Per-layer KL (or MAP penalty), not scaled by `ν_ℓ`.
    pub layer_terms: Vec<f64>,
}

impl SparseTerms {
    pub fn expected_log_lik(&self) -> f64 {
        self.fit + self.variance_correction
    }
}

impl Model {
    fn from_state(s: &SparseState) -> Self {
        Model {
            x_i: s.inducing_inputs.clone(),
            grams: s
                .inducing_grams
                .iter()
                .map(|g| g.matrix().clone())
                .collect(),
            outputs: s.inducing_outputs.clone(),
            kernels: s.kernels.clone(),
            widths: s.widths.clone(),
            noise_var: s.noise_var,
            pinned: false,
            kl_order: KlOrder::default(),
            kind: ObjectiveKind::Dkm,
            output: OutputMode::default(),
        }
    }

    fn depth(&self) -> usize {
        self.widths.depth()
    }

    fn forward(&self, x_t: &DMatrix<f64>, full_tt: bool) -> Result<Forward> {
        let mut blocks = GramBlocks::from_inputs(&self.x_i, x_t, full_tt)?;
        let depth = self.depth();
        let mut layers = Vec::with_capacity(depth + 1);
        let mut grams = Vec::with_capacity(depth);
        let mut hidden = Vec::with_capacity(depth);
        for l in 0..=depth {
            let kb = self.kernels[l].apply_blocks(&blocks)?;
            let chol_kii =
                Chol::named(&kb.ii, &format!("inducing kernel K_ii at layer {}", l + 1))?;
            let a = chol_kii.solve(&kb.ti.transpose()).transpose();
            let next = if l < depth {
                let g = if self.pinned {
                    kb.ii.clone()
                } else {
                    self.grams[l].clone()
                };
                let b = &a * &g;
                let tt = match &kb.tt {
                    TtBlock::Diag(kd) => {
                        let d = DVector::from_fn(a.nrows(), |t, _| {
                            let v = b.row(t).dot(&a.row(t)) + kd[t] - a.row(t).dot(&kb.ti.row(t));
                            v.max(0.0)
                        });
                        TtBlock::Diag(d)
                    }
                    TtBlock::Full(kf) => {
                        let m = &b * a.transpose() + kf - &a * kb.ti.transpose();
                        TtBlock::Full(symmetrize(&m))
                    }
                };
                hidden.push(LayerBlocks {
                    g_ti: b.clone(),
                    g_tt: tt.clone(),
                });
                grams.push(g.clone());
                Some(GramBlocks { ii: g, ti: b, tt })
            } else {
                None
            };
            layers.push(LayerCache {
                input: blocks.clone(),
                kb,
                chol_kii,
                a,
            });
            if let Some(n) = next {
                blocks = n;
            }
        }
        Ok(Forward {
            layers,
            grams,
            hidden,
        })
    }

    fn gram_chol(&self, g: &DMatrix<f64>, l: usize) -> Result<Option<Chol>> {
        match self.kind {
            ObjectiveKind::Map => Ok(None),
            ObjectiveKind::Dkm => {
                Chol::named(g, &format!("inducing Gram G_ii at layer {l}")).map(Some)
            }
        }
    }

    fn layer_term(&self, g: &DMatrix<f64>, cache: &LayerCache, cg: Option<&Chol>) -> f64 {
        let p = g.nrows() as f64;
        let c_k = &cache.chol_kii;
        let trace_kg = c_k.solve(g).trace();
        match (cg, self.kl_order) {
            (None, _) => 0.5 * (c_k.log_det() + trace_kg),
            (Some(cg), KlOrder::PosteriorFirst) => {
                0.5 * (trace_kg - p + c_k.log_det() - cg.log_det())
            }
            (Some(cg), KlOrder::PriorFirst) => {
                0.5 * (cg.solve(&cache.kb.ii).trace() - p + cg.log_det() - c_k.log_det())
            }
        }
    }

    /// Full-entry gradients of the layer term with respect to `G` and `K`.
    fn layer_term_grad(
        &self,
        g: &DMatrix<f64>,
        kinv: &DMatrix<f64>,
        k: &DMatrix<f64>,
        cg: Option<&Chol>,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        match (cg, self.kl_order) {
            (None, _) => (kinv * 0.5, (kinv - kinv * g * kinv) * 0.5),
            (Some(cg), KlOrder::PosteriorFirst) => {
                let ginv = cg.inverse();
                ((kinv - ginv) * 0.5, (kinv - kinv * g * kinv) * 0.5)
            }
            (Some(cg), KlOrder::PriorFirst) => {
                let ginv = cg.inverse();
                ((&ginv - &ginv * k * &ginv) * 0.5, (&ginv - kinv) * 0.5)
            }
        }
    }

    fn objective(
        &self,
        x_b: &DMatrix<f64>,
        y_b: &DMatrix<f64>,
        scale: f64,
        want_grad: bool,
    ) -> Result<(SparseTerms, Option<SparseGrad>)> {
        if x_b.nrows() == 0 {
            return Err(invalid("batch is empty"));
        }
        if y_b.nrows() != x_b.nrows() || y_b.ncols() != self.outputs.ncols() {
            return Err(invalid("batch inputs and targets do not match the model"));
        }
        let fwd = self.forward(x_b, false)?;
        let depth = self.depth();
        let out = fwd.output();
        let v = out.kb.tt.diag()
            - DVector::from_fn(out.a.nrows(), |t, _| out.a.row(t).dot(&out.kb.ti.row(t)));
        let s2 = self.noise_var;
        if s2 <= 0.0 {
            return Err(DkmError::Config(
                "the expected log-likelihood needs a positive noise variance".into(),
            ));
        }
        let n_out = y_b.ncols() as f64;
        let collapsed = match self.output {
            OutputMode::Learned => None,
            OutputMode::Collapsed => {
                if scale != 1.0 {
                    return Err(DkmError::Config(
                        "the collapsed output layer needs the full batch".into(),
                    ));
                }
                let mut c = symmetrize(&(&out.a * out.kb.ti.transpose()));
                add_diag(&mut c, s2);
                Some(Chol::named(&c, "K_ti K_ii⁻¹ K_it + σ²I")?)
            }
        };
        let mean = &out.a * &self.outputs;
        let resid = y_b - &mean;
        let n_terms = resid.len() as f64;
        let fit = match &collapsed {
            None => {
                scale
                    * (-0.5 * n_terms * (2.0 * std::f64::consts::PI * s2).ln()
                        - resid.norm_squared() / (2.0 * s2))
            }
            Some(cc) => {
                -0.5 * n_terms * (2.0 * std::f64::consts::PI).ln()
                    - 0.5 * n_out * cc.log_det()
                    - 0.5 * y_b.dot(&cc.solve(y_b))
            }
        };
        let var_sum: f64 = v.iter().map(|x| x.max(0.0)).sum();
        let variance_correction = -scale * n_out * var_sum / (2.0 * s2);

        let mut layer_terms = Vec::with_capacity(depth);
        let mut gram_chols = Vec::with_capacity(depth);
        let mut value = fit + variance_correction;
        for l in 1..=depth {
            let term = if self.pinned {
                gram_chols.push(None);
                0.0
            } else {
                let g = &fwd.grams[l - 1];
                let cg = self.gram_chol(g, l)?;
                let term = self.layer_term(g, &fwd.layers[l - 1], cg.as_ref());
                gram_chols.push(cg);
                term
            };
            layer_terms.push(term);
            value -= self.widths.nu(l) * term;
        }
        if !value.is_finite() {
            return Err(DkmError::Numerical(format!(
                "sparse objective evaluated to {value}"
            )));
        }
        let terms = SparseTerms {
            value,
            fit,
            variance_correction,
            layer_terms,
        };
        if !want_grad {
            return Ok((terms, None));
        }

        // Output layer.
        let v_bar = -scale * n_out / (2.0 * s2);
        let mut a_bar = -&out.kb.ti * v_bar;
        let mut log_noise_bar = scale * n_out * var_sum / (2.0 * s2);
        let mut outputs_bar = DMatrix::zeros(self.outputs.nrows(), self.outputs.ncols());
        let mut k_bar_ti = &out.a * (-v_bar);
        let mut k_bar_ii_direct = None;
        match &collapsed {
            None => {
                let m_bar = &resid * (scale / s2);
                a_bar += &m_bar * self.outputs.transpose();
                outputs_bar = out.a.transpose() * &m_bar;
                log_noise_bar += scale * (-0.5 * n_terms + resid.norm_squared() / (2.0 * s2));
            }
            Some(cc) => {
                // With Q = K_ti K_ii⁻¹ K_it: K̄_ti = 2 C̄ A and K̄_ii = −Aᵀ C̄ A.
                let alpha = cc.solve(y_b);
                let c_bar = (&alpha * alpha.transpose() - cc.inverse() * n_out) * 0.5;
                let ca = &c_bar * &out.a;
                k_bar_ti += &ca * 2.0;
                k_bar_ii_direct = Some(-(out.a.transpose() * ca));
                log_noise_bar += s2 * c_bar.trace();
            }
        }
        let k_bar_tt = DVector::from_element(out.a.nrows(), v_bar);
        let (k_ti_extra, mut k_bar_ii) = pull_back_a(out, &out.chol_kii.inverse(), &a_bar);
        k_bar_ti += k_ti_extra;
        if let Some(d) = k_bar_ii_direct {
            k_bar_ii += d;
        }
        let (mut g_bar_ii, mut g_bar_ti, mut g_bar_tt, h) =
            self.kernels[depth].vjp_blocks(&out.input, &k_bar_ii, &k_bar_ti, &k_bar_tt);
        let mut hypers = vec![Vec::new(); depth + 1];
        hypers[depth] = h;
        let mut gram_grads = vec![DMatrix::zeros(0, 0); depth];

        for l in (1..=depth).rev() {
            let cache = &fwd.layers[l - 1];
            let g = &fwd.grams[l - 1];
            let a = &cache.a;
            // G_ti = A G and diag G_tt = rowsum((A G) ∘ A) + k_tt − rowsum(A ∘ K_ti).
            let ag = &fwd.hidden[l - 1].g_ti;
            let mut a_bar = &g_bar_ti * g;
            let mut scaled_a = a.clone();
            let mut two_ag_minus_kti = ag * 2.0 - &cache.kb.ti;
            for t in 0..a.nrows() {
                scaled_a.row_mut(t).scale_mut(g_bar_tt[t]);
                two_ag_minus_kti.row_mut(t).scale_mut(g_bar_tt[t]);
            }
            a_bar += two_ag_minus_kti;
            g_bar_ii += a.transpose() * (&g_bar_ti + &scaled_a);
            let mut k_bar_ti = -scaled_a;
            let k_bar_tt = g_bar_tt.clone();
            let kinv = cache.chol_kii.inverse();
            let (extra, mut k_bar_ii) = pull_back_a(cache, &kinv, &a_bar);
            k_bar_ti += extra;

            let nu = self.widths.nu(l);
            if self.pinned {
                k_bar_ii += &g_bar_ii;
            } else {
                let (dg, dk) =
                    self.layer_term_grad(g, &kinv, &cache.kb.ii, gram_chols[l - 1].as_ref());
                g_bar_ii -= dg * nu;
                k_bar_ii -= dk * nu;
                gram_grads[l - 1] = symmetrize(&g_bar_ii);
            }
            let (gi, gti, gtt, h) =
                self.kernels[l - 1].vjp_blocks(&cache.input, &k_bar_ii, &k_bar_ti, &k_bar_tt);
            hypers[l - 1] = h;
            g_bar_ii = gi;
            g_bar_ti = gti;
            g_bar_tt = gtt;
        }
        Ok((
            terms,
            Some(SparseGrad {
                grams: gram_grads,
                outputs: outputs_bar,
                hypers,
                log_noise: log_noise_bar,
            }),
        ))
    }
}

/// Pulls `∂/∂A` for `A = K_ti K_ii⁻¹` back to `(∂/∂K_ti, ∂/∂K_ii)`.
fn pull_back_a(
    cache: &LayerCache,
    kinv: &DMatrix<f64>,
    a_bar: &DMatrix<f64>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let k_bar_ti = a_bar * kinv;
    let k_bar_ii = -(cache.a.transpose() * &k_bar_ti);
    (k_bar_ti, k_bar_ii)
}

/// Propagates points `x_t` through the hidden layers.
pub fn propagate(
    state: &SparseState,
    x_t: &DMatrix<f64>,
    full_tt: bool,
) -> Result<PropagatedBlocks> {
    let fwd = Model::from_state(state).forward(x_t, full_tt)?;
    Ok(PropagatedBlocks { layers: fwd.hidden })
}

/// Predictive mean `K_ti K_ii⁻¹ F_i` and covariance `K_tt − K_ti K_ii⁻¹ K_it + σ²I`.
pub fn predict(state: &SparseState, x_t: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let fwd = Model::from_state(state).forward(x_t, true)?;
    let out = fwd.output();
    let mean = &out.a * &state.inducing_outputs;
    let TtBlock::Full(k_tt) = &out.kb.tt else {
        unreachable!("full test block requested")
    };
    let mut cov = symmetrize(&(k_tt - &out.a * out.kb.ti.transpose()));
    add_diag(&mut cov, state.noise_var);
    Ok((mean, cov))
}

/// Predictive mean and marginal variances only; linear in the number of points.
pub fn predict_marginals(
    state: &SparseState,
    x_t: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let fwd = Model::from_state(state).forward(x_t, false)?;
    let out = fwd.output();
    let mean = &out.a * &state.inducing_outputs;
    let k_tt = out.kb.tt.diag();
    let var = DVector::from_fn(out.a.nrows(), |t, _| {
        k_tt[t] - out.a.row(t).dot(&out.kb.ti.row(t)) + state.noise_var
    });
    Ok((mean, var))
}

/// Objective options that are not part of the state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SparseObjectiveOptions {
    pub kl_order: KlOrder,
    pub kind: ObjectiveKind,
    /// Gram matrices follow the kernel recursion (the NNGP baseline).
    pub pinned: bool,
    pub output: OutputMode,
}

fn model_with(state: &SparseState, opts: SparseObjectiveOptions) -> Model {
    let mut m = Model::from_state(state);
    m.kl_order = opts.kl_order;
    m.kind = opts.kind;
    m.pinned = opts.pinned;
    m.output = opts.output;
    m
}

/// `(total_train/|batch|)·E_Q[log P(Y_b|F_b)] − Σ_ℓ ν_ℓ KL(G_ii^ℓ ‖ K(G_ii^{ℓ-1}))`.
pub fn sparse_objective(
    state: &SparseState,
    x_batch: &DMatrix<f64>,
    y_batch: &DMatrix<f64>,
    total_train: usize,
) -> Result<f64> {
    sparse_objective_terms(
        state,
        x_batch,
        y_batch,
        total_train,
        SparseObjectiveOptions::default(),
    )
    .map(|t| t.value)
}

pub fn sparse_objective_terms(
    state: &SparseState,
    x_batch: &DMatrix<f64>,
    y_batch: &DMatrix<f64>,
    total_train: usize,
    opts: SparseObjectiveOptions,
) -> Result<SparseTerms> {
    let scale = total_train as f64 / x_batch.nrows().max(1) as f64;
    Ok(model_with(state, opts)
        .objective(x_batch, y_batch, scale, false)?
        .0)
}

/// Gradients of the sparse objective, exposed for checking against finite
/// differences. Gram gradients are with respect to `G_ii^ℓ` (symmetric),
/// hyperparameter gradients are in log space.
#[derive(Clone, Debug)]
pub struct SparseGradient {
    pub grams: Vec<DMatrix<f64>>,
    pub outputs: DMatrix<f64>,
    pub log_hypers: Vec<Vec<f64>>,
    pub log_noise_var: f64,
}

pub fn sparse_objective_gradient(
    state: &SparseState,
    x_batch: &DMatrix<f64>,
    y_batch: &DMatrix<f64>,
    total_train: usize,
    opts: SparseObjectiveOptions,
) -> Result<SparseGradient> {
    let scale = total_train as f64 / x_batch.nrows().max(1) as f64;
    let (_, g) = model_with(state, opts).objective(x_batch, y_batch, scale, true)?;
    let g = g.expect("gradient requested");
    Ok(SparseGradient {
        grams: g.grams,
        outputs: g.outputs,
        log_hypers: g.hypers,
        log_noise_var: g.log_noise,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SparseConfig {
    /// Number of inducing points, capped at the number of training points.
    pub inducing: usize,
    pub optimizer: OptimizerConfig,
    /// Minibatch size; `None` trains on the full batch.
    pub batch_size: Option<usize>,
    pub kl_order: KlOrder,
    pub objective: ObjectiveKind,
    pub output: OutputMode,
    pub train_hypers: bool,
    pub train_noise: bool,
}

impl Default for SparseConfig {
    fn default() -> Self {
        SparseConfig {
            inducing: 300,
            optimizer: OptimizerConfig::default(),
            batch_size: None,
            kl_order: KlOrder::default(),
            objective: ObjectiveKind::Dkm,
            output: OutputMode::default(),
            train_hypers: true,
            train_noise: true,
        }
    }
}

/// Seeded choice of inducing rows among `p` training rows, in ascending order.
pub fn choose_inducing(p: usize, n: usize, seed: u64) -> Vec<usize> {
    let n = n.min(p);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, p, n).into_vec();
    idx.sort_unstable();
    idx
}

/// Default starting state for training: seeded inducing subset of the training
/// inputs, prior-recursion Gram matrices, projected outputs.
pub fn init_sparse_state(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    kernels: Vec<KernelSpec>,
    widths: WidthProfile,
    noise_var: f64,
    config: &SparseConfig,
) -> Result<SparseState> {
    let rows = choose_inducing(x.nrows(), config.inducing, config.optimizer.seed);
    SparseState::initialize(select_rows(x, &rows), x, y, kernels, widths, noise_var)
}

/// Jointly trains inducing Gram factors, inducing outputs, kernel
/// hyperparameters and the noise variance by Adam on the sparse objective.
pub fn train_sparse(
    state: SparseState,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    config: &SparseConfig,
) -> Result<(SparseState, Trace)> {
    train_impl(state, x, y, config, false)
}

/// The kernel-hyperparameter-only baseline: Gram matrices are pinned to the
/// kernel recursion and only hyperparameters, noise and inducing outputs move.
pub fn nngp_baseline(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    kernels: Vec<KernelSpec>,
    widths: WidthProfile,
    noise_var: f64,
    config: &SparseConfig,
) -> Result<(SparseState, Trace)> {
    let state = init_sparse_state(x, y, kernels, widths, noise_var, config)?;
    train_impl(state, x, y, config, true)
}

fn train_impl(
    state: SparseState,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    config: &SparseConfig,
    pinned: bool,
) -> Result<(SparseState, Trace)> {
    config.optimizer.validate()?;
    if x.nrows() != y.nrows() || x.nrows() == 0 {
        return Err(invalid(
            "training inputs and targets must be non-empty and aligned",
        ));
    }
    if y.ncols() != state.inducing_outputs.ncols() {
        return Err(invalid("target columns do not match the inducing outputs"));
    }
    if state.noise_var <= 0.0 {
        return Err(DkmError::Config(
            "training needs a positive initial noise variance".into(),
        ));
    }
    let p = x.nrows();
    let batch = config.batch_size.map(|b| b.clamp(1, p)).unwrap_or(p);
    if config.output == OutputMode::Collapsed && batch < p {
        return Err(DkmError::Config(
            "the collapsed output layer needs the full batch".into(),
        ));
    }
    let opts = SparseObjectiveOptions {
        kl_order: config.kl_order,
        kind: config.objective,
        pinned,
        output: config.output,
    };
    let mut model = model_with(&state, opts);
    let pi = state.n_inducing() as f64;
    let mut factors: Vec<DMatrix<f64>> = if pinned {
        Vec::new()
    } else {
        model
            .grams
            .iter()
            .enumerate()
            .map(|(l, g)| {
                Chol::named(g, &format!("initial G_ii at layer {}", l + 1))
                    .map(|c| c.l() * pi.sqrt())
            })
            .collect::<Result<_>>()?
    };
    let mut log_hypers: Vec<Vec<f64>> = model.kernels.iter().map(KernelSpec::log_hypers).collect();
    let mut log_noise = vec![model.noise_var.ln()];

    let oc = &config.optimizer;
    let mut adam_factors: Vec<Adam> = factors.iter().map(|f| Adam::new(f.len(), oc)).collect();
    let mut adam_out = Adam::new(model.outputs.len(), oc);
    let mut adam_hypers: Vec<Adam> = log_hypers.iter().map(|h| Adam::new(h.len(), oc)).collect();
    let mut adam_noise = Adam::new(1, oc);
    let mut rng = ChaCha8Rng::seed_from_u64(oc.seed);
    let mut trace = Trace::default();

    for it in 0..oc.iterations {
        let (xb, yb) = if batch < p {
            let rows = sample(&mut rng, p, batch).into_vec();
            (select_rows(x, &rows), select_rows(y, &rows))
        } else {
            (x.clone(), y.clone())
        };
        let (terms, grad) = model.objective(&xb, &yb, p as f64 / batch as f64, true)?;
        let grad = grad.expect("gradient requested");
        trace.rows.push(TraceRow {
            iteration: it,
            objective: terms.value,
            log_lik: terms.expected_log_lik(),
            layer_terms: terms.layer_terms,
        });
        let lr = oc.learning_rate_at(it);
        for (l, ((r, gb), adam)) in factors
            .iter_mut()
            .zip(&grad.grams)
            .zip(adam_factors.iter_mut())
            .enumerate()
        {
            let r_bar = gb * &*r * (2.0 / pi);
            check_finite(r_bar.as_slice(), "Gram factor gradient", it, Some(l + 1))?;
            adam.ascend(r.as_mut_slice(), r_bar.as_slice(), lr);
        }
        if config.output == OutputMode::Learned {
            check_finite(
                grad.outputs.as_slice(),
                "inducing output gradient",
                it,
                None,
            )?;
            adam_out.ascend(model.outputs.as_mut_slice(), grad.outputs.as_slice(), lr);
        }
        if config.train_hypers {
            for (l, ((h, gh), adam)) in log_hypers
                .iter_mut()
                .zip(&grad.hypers)
                .zip(adam_hypers.iter_mut())
                .enumerate()
            {
                check_finite(gh, "hyperparameter gradient", it, Some(l + 1))?;
                // Zero skip weights have log −∞ and stay fixed.
                let mask: Vec<f64> = gh
                    .iter()
                    .zip(h.iter())
                    .map(|(g, v)| if v.is_finite() { *g } else { 0.0 })
                    .collect();
                adam.ascend(h, &mask, lr);
                model.kernels[l] = model.kernels[l].with_log_hypers(h);
            }
        }
        if config.train_noise {
            check_finite(&[grad.log_noise], "noise gradient", it, None)?;
            adam_noise.ascend(&mut log_noise, &[grad.log_noise], lr);
            model.noise_var = log_noise[0].exp();
        }
        for (g, r) in model.grams.iter_mut().zip(&factors) {
            *g = r * r.transpose() / pi;
        }
    }
    let (terms, _) = model.objective(x, y, 1.0, false)?;
    trace.rows.push(TraceRow {
        iteration: oc.iterations,
        objective: terms.value,
        log_lik: terms.expected_log_lik(),
        layer_terms: terms.layer_terms,
    });
    let grams = if pinned {
        SparseState::prior_grams(&model.x_i, &model.kernels, model.depth())?
    } else {
        model
            .grams
            .iter()
            .map(|g| GramMatrix::from_trusted(g.clone()))
            .collect()
    };
    let mut out = SparseState::new(
        model.x_i,
        grams,
        model.outputs,
        model.kernels,
        model.widths,
        model.noise_var,
    )?;
    if config.output == OutputMode::Collapsed {
        out.inducing_outputs = out.projected_outputs(x, y)?;
    }
    Ok((out, trace))
}

fn check_finite(v: &[f64], what: &str, iteration: usize, layer: Option<usize>) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(DkmError::NonFinite {
            what: what.to_string(),
            iteration,
            layer,
        })
    }
}

/// Prediction from a full (non-sparse) model: training points are propagated
/// with their own Gram matrices and the output layer is exact GP regression,
/// mean `K_ti (K_ii + σ²I)⁻¹ Y`, covariance `K_tt − K_ti (K_ii + σ²I)⁻¹ K_it + σ²I`.
pub fn full_predict(
    train_grams: &[GramMatrix],
    x_train: &DMatrix<f64>,
    y_train: &DMatrix<f64>,
    kernels: &[KernelSpec],
    widths: &WidthProfile,
    noise_var: f64,
    x_test: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let state = SparseState::new(
        x_train.clone(),
        train_grams.to_vec(),
        y_train.clone(),
        kernels.to_vec(),
        widths.clone(),
        noise_var,
    )?;
    let fwd = Model::from_state(&state).forward(x_test, true)?;
    let out = fwd.output();
    let mut c = out.kb.ii.clone();
    add_diag(&mut c, noise_var);
    let cc = Chol::named(&c, "K_ii + σ²I")?;
    let alpha = cc.solve(y_train);
    let mean = &out.kb.ti * alpha;
    let TtBlock::Full(k_tt) = &out.kb.tt else {
        unreachable!("full test block requested")
    };
    let mut cov = symmetrize(&(k_tt - &out.kb.ti * cc.solve(&out.kb.ti.transpose())));
    add_diag(&mut cov, noise_var);
    Ok((mean, cov))
}
