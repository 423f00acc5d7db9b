//! Kernel functions mapping a Gram matrix to the next layer's covariance.
//!
//! Every kernel here is a function of three numbers per entry: the two
//! diagonal values `G_ii`, `G_jj` and the off-diagonal `G_ij`. That keeps the
//! full-matrix, block and gradient code paths sharing one scalar definition.

use std::f64::consts::{FRAC_1_PI, PI};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, DkmError, Result};
use crate::gram::GramMatrix;

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelSpec {
    Linear,
    SqExp {
        #[serde(default = "one")]
        lengthscale: f64,
    },
    ArcCosRelu,
    LeakyRelu {
        p: f64,
    },
    Skip {
        w1: f64,
        w2: f64,
        #[serde(default = "one")]
        lengthscale: f64,
    },
}

/// Value of one kernel entry and its partial derivatives with respect to
/// `G_ij`, `G_ii` and `G_jj`.
#[derive(Clone, Copy, Debug)]
struct EntryGrad {
    k: f64,
    d_ij: f64,
    d_i: f64,
    d_j: f64,
}

impl KernelSpec {
    pub fn sqexp(lengthscale: f64) -> Self {
        KernelSpec::SqExp { lengthscale }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DkmError::Config(m));
        match *self {
            KernelSpec::Linear | KernelSpec::ArcCosRelu => Ok(()),
            KernelSpec::SqExp { lengthscale }
                if !(lengthscale > 0.0 && lengthscale.is_finite()) =>
            {
                bad(format!(
                    "sqexp lengthscale must be positive, got {lengthscale}"
                ))
            }
            KernelSpec::LeakyRelu { p } if !(p > 0.0 && p <= 1.0) => {
                bad(format!("leaky_relu p must lie in (0, 1], got {p}"))
            }
            KernelSpec::Skip {
                w1,
                w2,
                lengthscale,
            } => {
                if !(w1 >= 0.0 && w2 >= 0.0 && w1.is_finite() && w2.is_finite()) {
                    bad(format!("skip weights must be non-negative, got {w1}, {w2}"))
                } else if w1 + w2 <= 0.0 {
                    bad("skip weights must not both be zero".into())
                } else if !(lengthscale > 0.0 && lengthscale.is_finite()) {
                    bad(format!(
                        "skip lengthscale must be positive, got {lengthscale}"
                    ))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            KernelSpec::Linear => "linear",
            KernelSpec::SqExp { .. } => "sqexp",
            KernelSpec::ArcCosRelu => "arccos_relu",
            KernelSpec::LeakyRelu { .. } => "leaky_relu",
            KernelSpec::Skip { .. } => "skip",
        }
    }

    fn needs_positive_diag(&self) -> bool {
        matches!(self, KernelSpec::ArcCosRelu | KernelSpec::LeakyRelu { .. })
    }

    #[inline]
    fn entry(&self, gi: f64, gj: f64, gij: f64) -> f64 {
        match *self {
            KernelSpec::Linear => gij,
            KernelSpec::SqExp { lengthscale } => sqexp_entry(gi, gj, gij, lengthscale),
            KernelSpec::ArcCosRelu => arccos_entry(gi, gj, gij),
            KernelSpec::LeakyRelu { p } => p * arccos_entry(gi, gj, gij) + (1.0 - p) * gij,
            KernelSpec::Skip {
                w1,
                w2,
                lengthscale,
            } => w1 * gij + w2 * sqexp_entry(gi, gj, gij, lengthscale),
        }
    }

    #[inline]
    fn diag_entry(&self, g: f64) -> f64 {
        match *self {
            KernelSpec::SqExp { .. } => 1.0,
            KernelSpec::Skip { w1, w2, .. } => w1 * g + w2,
            _ => g,
        }
    }

    /// Derivative of a diagonal entry with respect to its own Gram entry.
    #[inline]
    fn diag_slope(&self) -> f64 {
        match *self {
            KernelSpec::SqExp { .. } => 0.0,
            KernelSpec::Skip { w1, .. } => w1,
            _ => 1.0,
        }
    }

    #[inline]
    fn entry_grad(&self, gi: f64, gj: f64, gij: f64) -> EntryGrad {
        match *self {
            KernelSpec::Linear => EntryGrad {
                k: gij,
                d_ij: 1.0,
                d_i: 0.0,
                d_j: 0.0,
            },
            KernelSpec::SqExp { lengthscale } => sqexp_grad(gi, gj, gij, lengthscale),
            KernelSpec::ArcCosRelu => arccos_grad(gi, gj, gij),
            KernelSpec::LeakyRelu { p } => {
                let a = arccos_grad(gi, gj, gij);
                EntryGrad {
                    k: p * a.k + (1.0 - p) * gij,
                    d_ij: p * a.d_ij + (1.0 - p),
                    d_i: p * a.d_i,
                    d_j: p * a.d_j,
                }
            }
            KernelSpec::Skip {
                w1,
                w2,
                lengthscale,
            } => {
                let s = sqexp_grad(gi, gj, gij, lengthscale);
                EntryGrad {
                    k: w1 * gij + w2 * s.k,
                    d_ij: w1 + w2 * s.d_ij,
                    d_i: w2 * s.d_i,
                    d_j: w2 * s.d_j,
                }
            }
        }
    }

    /// Number of trainable hyperparameters.
    pub fn n_hypers(&self) -> usize {
        match self {
            KernelSpec::SqExp { .. } => 1,
            KernelSpec::Skip { .. } => 3,
            _ => 0,
        }
    }

    /// Trainable hyperparameters in log space: `[log ℓ]` for SqExp and
    /// `[log w1, log w2, log ℓ]` for Skip.
    pub fn log_hypers(&self) -> Vec<f64> {
        match *self {
            KernelSpec::SqExp { lengthscale } => vec![lengthscale.ln()],
            KernelSpec::Skip {
                w1,
                w2,
                lengthscale,
            } => vec![w1.ln(), w2.ln(), lengthscale.ln()],
            _ => vec![],
        }
    }

    pub fn with_log_hypers(&self, h: &[f64]) -> Self {
        match *self {
            KernelSpec::SqExp { .. } => KernelSpec::SqExp {
                lengthscale: h[0].exp(),
            },
            KernelSpec::Skip { .. } => KernelSpec::Skip {
                w1: h[0].exp(),
                w2: h[1].exp(),
                lengthscale: h[2].exp(),
            },
            ref other => other.clone(),
        }
    }

    /// Derivatives of one entry with respect to the log hyperparameters.
    #[inline]
    fn hyper_entry_grad(&self, gi: f64, gj: f64, gij: f64, out: &mut [f64], weight: f64) {
        match *self {
            KernelSpec::SqExp { lengthscale } => {
                let r = (gi + gj - 2.0 * gij).max(0.0);
                let k = (-r / (2.0 * lengthscale * lengthscale)).exp();
                out[0] += weight * k * r / (lengthscale * lengthscale);
            }
            KernelSpec::Skip {
                w1,
                w2,
                lengthscale,
            } => {
                let r = (gi + gj - 2.0 * gij).max(0.0);
                let k = (-r / (2.0 * lengthscale * lengthscale)).exp();
                out[0] += weight * w1 * gij;
                out[1] += weight * w2 * k;
                out[2] += weight * w2 * k * r / (lengthscale * lengthscale);
            }
            _ => {}
        }
    }

    #[inline]
    fn hyper_diag_grad(&self, g: f64, out: &mut [f64], weight: f64) {
        if let KernelSpec::Skip { w1, w2, .. } = *self {
            out[0] += weight * w1 * g;
            out[1] += weight * w2;
        }
    }

    fn check_diag(&self, diag: impl Iterator<Item = f64>) -> Result<()> {
        if self.needs_positive_diag() {
            for (i, d) in diag.enumerate() {
                if d <= 0.0 {
                    return Err(DkmError::Degenerate(format!(
                        "{} kernel needs a positive diagonal, entry {i} is {d:e}",
                        self.name()
                    )));
                }
            }
        }
        Ok(())
    }

    /// `K(G)`.
    pub fn apply(&self, g: &GramMatrix) -> Result<GramMatrix> {
        Ok(GramMatrix::from_trusted(self.apply_raw(g.matrix())?))
    }

    pub(crate) fn apply_raw(&self, g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_diag(g.diagonal().iter().copied())?;
        let p = g.nrows();
        let mut k = DMatrix::zeros(p, p);
        for j in 0..p {
            let gj = g[(j, j)];
            k[(j, j)] = self.diag_entry(gj);
            for i in (j + 1)..p {
                let v = self.entry(g[(i, i)], gj, g[(i, j)]);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        Ok(k)
    }

    /// Pulls a gradient with respect to `K(G)` back to `G`. Both gradients treat
    /// every entry as an independent variable; symmetrize the result to get the
    /// gradient in the symmetric-matrix sense.
    pub fn vjp(&self, g: &DMatrix<f64>, k_bar: &DMatrix<f64>) -> DMatrix<f64> {
        let p = g.nrows();
        let mut g_bar = DMatrix::zeros(p, p);
        let slope = self.diag_slope();
        for j in 0..p {
            let gj = g[(j, j)];
            g_bar[(j, j)] += k_bar[(j, j)] * slope;
            for i in 0..p {
                if i == j {
                    continue;
                }
                let e = self.entry_grad(g[(i, i)], gj, g[(i, j)]);
                let kb = k_bar[(i, j)];
                g_bar[(i, j)] += kb * e.d_ij;
                g_bar[(i, i)] += kb * e.d_i;
                g_bar[(j, j)] += kb * e.d_j;
            }
        }
        g_bar
    }

    /// Gradient with respect to the log hyperparameters given `∂/∂K`.
    pub fn hyper_grad(&self, g: &DMatrix<f64>, k_bar: &DMatrix<f64>) -> Vec<f64> {
        let mut out = vec![0.0; self.n_hypers()];
        if out.is_empty() {
            return out;
        }
        let p = g.nrows();
        for j in 0..p {
            let gj = g[(j, j)];
            self.hyper_diag_grad(gj, &mut out, k_bar[(j, j)]);
            for i in 0..p {
                if i != j {
                    self.hyper_entry_grad(g[(i, i)], gj, g[(i, j)], &mut out, k_bar[(i, j)]);
                }
            }
        }
        out
    }

    /// Applies the kernel to a joint Gram matrix given in blocks.
    pub fn apply_blocks(&self, g: &GramBlocks) -> Result<GramBlocks> {
        self.check_diag(g.tt.diag().iter().copied())?;
        let ii = self.apply_raw(&g.ii)?;
        let gii_diag = g.ii.diagonal();
        let gtt_diag = g.tt.diag();
        let (pt, pi) = (g.ti.nrows(), g.ti.ncols());
        let ti = DMatrix::from_fn(pt, pi, |t, j| {
            self.entry(gtt_diag[t], gii_diag[j], g.ti[(t, j)])
        });
        let tt = match &g.tt {
            TtBlock::Diag(d) => TtBlock::Diag(d.map(|v| self.diag_entry(v))),
            TtBlock::Full(m) => TtBlock::Full(self.apply_raw(m)?),
        };
        Ok(GramBlocks { ii, ti, tt })
    }

    /// Block version of [`KernelSpec::vjp`]; only the diagonal of the test
    /// block is supported. Returns the pulled-back blocks and the
    /// hyperparameter gradient.
    pub fn vjp_blocks(
        &self,
        g: &GramBlocks,
        k_bar_ii: &DMatrix<f64>,
        k_bar_ti: &DMatrix<f64>,
        k_bar_tt: &DVector<f64>,
    ) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>, Vec<f64>) {
        let mut g_bar_ii = self.vjp(&g.ii, k_bar_ii);
        let mut hyper = self.hyper_grad(&g.ii, k_bar_ii);
        let gii_diag = g.ii.diagonal();
        let gtt_diag = g.tt.diag();
        let (pt, pi) = (g.ti.nrows(), g.ti.ncols());
        let mut g_bar_ti = DMatrix::zeros(pt, pi);
        let slope = self.diag_slope();
        let mut g_bar_tt = k_bar_tt * slope;
        for j in 0..pi {
            let gj = gii_diag[j];
            for t in 0..pt {
                let kb = k_bar_ti[(t, j)];
                if kb == 0.0 {
                    continue;
                }
                let e = self.entry_grad(gtt_diag[t], gj, g.ti[(t, j)]);
                g_bar_ti[(t, j)] = kb * e.d_ij;
                g_bar_tt[t] += kb * e.d_i;
                g_bar_ii[(j, j)] += kb * e.d_j;
                self.hyper_entry_grad(gtt_diag[t], gj, g.ti[(t, j)], &mut hyper, kb);
            }
        }
        for t in 0..pt {
            self.hyper_diag_grad(gtt_diag[t], &mut hyper, k_bar_tt[t]);
        }
        (g_bar_ii, g_bar_ti, g_bar_tt, hyper)
    }
}

/// Test-point block of a joint Gram matrix.
#[derive(Clone, Debug, PartialEq)]
pub enum TtBlock {
    Diag(DVector<f64>),
    Full(DMatrix<f64>),
}

impl TtBlock {
    pub fn diag(&self) -> DVector<f64> {
        match self {
            TtBlock::Diag(d) => d.clone(),
            TtBlock::Full(m) => m.diagonal(),
        }
    }
}

/// Joint Gram matrix over inducing (`i`) and test (`t`) points, stored as the
/// `ii` and `ti` blocks plus either the diagonal or the whole `tt` block.
#[derive(Clone, Debug, PartialEq)]
pub struct GramBlocks {
    pub ii: DMatrix<f64>,
    pub ti: DMatrix<f64>,
    pub tt: TtBlock,
}

impl GramBlocks {
    /// Input Gram blocks `(1/ν_0) X Xᵀ`.
    pub fn from_inputs(x_i: &DMatrix<f64>, x_t: &DMatrix<f64>, full_tt: bool) -> Result<Self> {
        if x_i.ncols() != x_t.ncols() {
            return Err(invalid(format!(
                "inducing inputs have {} columns, test inputs {}",
                x_i.ncols(),
                x_t.ncols()
            )));
        }
        let nu0 = x_i.ncols() as f64;
        let ii = x_i * x_i.transpose() / nu0;
        let ti = x_t * x_i.transpose() / nu0;
        let tt = if full_tt {
            TtBlock::Full(x_t * x_t.transpose() / nu0)
        } else {
            TtBlock::Diag(DVector::from_iterator(
                x_t.nrows(),
                x_t.row_iter().map(|r| r.norm_squared() / nu0),
            ))
        };
        Ok(GramBlocks {
            ii: (&ii + ii.transpose()) * 0.5,
            ti,
            tt,
        })
    }
}

#[inline]
fn sqexp_entry(gi: f64, gj: f64, gij: f64, l: f64) -> f64 {
    let r = (gi + gj - 2.0 * gij).max(0.0);
    (-r / (2.0 * l * l)).exp()
}

#[inline]
fn sqexp_grad(gi: f64, gj: f64, gij: f64, l: f64) -> EntryGrad {
    let k = sqexp_entry(gi, gj, gij, l);
    let dk_dr = -k / (2.0 * l * l);
    EntryGrad {
        k,
        d_ij: -2.0 * dk_dr,
        d_i: dk_dr,
        d_j: dk_dr,
    }
}

#[inline]
fn arccos_entry(gi: f64, gj: f64, gij: f64) -> f64 {
    let s = (gi * gj).sqrt();
    let c = (gij / s).clamp(-1.0, 1.0);
    let theta = c.acos();
    FRAC_1_PI * s * (theta.sin() + (PI - theta) * c)
}

#[inline]
fn arccos_grad(gi: f64, gj: f64, gij: f64) -> EntryGrad {
    let s = (gi * gj).sqrt();
    let c = (gij / s).clamp(-1.0, 1.0);
    let theta = c.acos();
    let sin = theta.sin();
    EntryGrad {
        k: FRAC_1_PI * s * (sin + (PI - theta) * c),
        d_ij: (PI - theta) * FRAC_1_PI,
        d_i: FRAC_1_PI * sin * s / (2.0 * gi),
        d_j: FRAC_1_PI * sin * s / (2.0 * gj),
    }
}

/// Pointwise nonlinearity whose arccos-type kernel is the leaky-ReLU kernel
/// with mixing weight `p`; `p = 1` is the `√2`-scaled ReLU.
pub fn leaky_relu_pointwise(x: f64, p: f64) -> f64 {
    let relu = std::f64::consts::SQRT_2 * x.max(0.0);
    p.sqrt() * relu + ((1.0 - p / 2.0).sqrt() - (p / 2.0).sqrt()) * x
}

/// Derivative of [`leaky_relu_pointwise`] (taking the right limit at 0).
pub fn leaky_relu_derivative(x: f64, p: f64) -> f64 {
    let relu = if x > 0.0 {
        std::f64::consts::SQRT_2
    } else {
        0.0
    };
    p.sqrt() * relu + ((1.0 - p / 2.0).sqrt() - (p / 2.0).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn sample_gram() -> GramMatrix {
        GramMatrix::new(DMatrix::from_row_slice(
            3,
            3,
            &[1.3, 0.4, -0.2, 0.4, 0.8, 0.1, -0.2, 0.1, 2.0],
        ))
        .unwrap()
    }

    #[test]
    fn linear_is_identity() {
        let g = sample_gram();
        assert_eq!(KernelSpec::Linear.apply(&g).unwrap(), g);
    }

    #[test]
    fn arccos_identity() {
        let k = KernelSpec::ArcCosRelu
            .apply(&GramMatrix::identity(2))
            .unwrap();
        assert_relative_eq!(k.matrix()[(0, 1)], FRAC_1_PI, epsilon = 1e-15);
        assert_relative_eq!(k.matrix()[(0, 0)], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn leaky_endpoints() {
        let g = sample_gram();
        let arc = KernelSpec::ArcCosRelu.apply(&g).unwrap();
        let p1 = KernelSpec::LeakyRelu { p: 1.0 }.apply(&g).unwrap();
        assert!((arc.matrix() - p1.matrix()).amax() < 1e-15);
        let p0 = KernelSpec::LeakyRelu { p: 1e-12 }.apply(&g).unwrap();
        assert!((g.matrix() - p0.matrix()).amax() < 1e-11);
    }

    #[test]
    fn sqexp_zero_distance() {
        let g = GramMatrix::new(DMatrix::from_element(2, 2, 0.7)).unwrap();
        let k = KernelSpec::sqexp(1.0).apply(&g).unwrap();
        assert_eq!(k.matrix()[(0, 1)], 1.0);
    }

    #[test]
    fn arccos_rejects_zero_diagonal() {
        let g = GramMatrix::from_trusted(DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]));
        assert!(matches!(
            KernelSpec::ArcCosRelu.apply(&g),
            Err(DkmError::Degenerate(_))
        ));
    }

    #[test]
    fn diagonal_preserved() {
        let g = sample_gram();
        for spec in [KernelSpec::ArcCosRelu, KernelSpec::LeakyRelu { p: 0.3 }] {
            let k = spec.apply(&g).unwrap();
            for i in 0..3 {
                assert_relative_eq!(k.matrix()[(i, i)], g.matrix()[(i, i)], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn pointwise_cases() {
        assert_relative_eq!(
            leaky_relu_pointwise(1.0, 1.0),
            std::f64::consts::SQRT_2,
            epsilon = 1e-15
        );
        assert_eq!(leaky_relu_pointwise(-1.0, 1.0), 0.0);
    }

    #[test]
    fn spec_validation() {
        assert!(KernelSpec::LeakyRelu { p: 0.0 }.validate().is_err());
        assert!(KernelSpec::Skip {
            w1: 0.0,
            w2: 0.0,
            lengthscale: 1.0
        }
        .validate()
        .is_err());
        assert!(KernelSpec::sqexp(-1.0).validate().is_err());
        assert!(KernelSpec::Skip {
            w1: 0.0,
            w2: 1.0,
            lengthscale: 1.0
        }
        .validate()
        .is_ok());
    }

    #[test]
    fn blocks_agree_with_full_matrix() {
        let g = sample_gram();
        let m = g.matrix();
        let blocks = GramBlocks {
            ii: m.view((0, 0), (2, 2)).into_owned(),
            ti: m.view((2, 0), (1, 2)).into_owned(),
            tt: TtBlock::Full(m.view((2, 2), (1, 1)).into_owned()),
        };
        for spec in [
            KernelSpec::Linear,
            KernelSpec::sqexp(0.7),
            KernelSpec::ArcCosRelu,
            KernelSpec::Skip {
                w1: 0.5,
                w2: 1.5,
                lengthscale: 1.2,
            },
        ] {
            let full = spec.apply_raw(m).unwrap();
            let b = spec.apply_blocks(&blocks).unwrap();
            assert!((b.ii - full.view((0, 0), (2, 2))).amax() < 1e-15);
            assert!((b.ti - full.view((2, 0), (1, 2))).amax() < 1e-15);
            assert_relative_eq!(b.tt.diag()[0], full[(2, 2)], epsilon = 1e-15);
        }
    }
}
