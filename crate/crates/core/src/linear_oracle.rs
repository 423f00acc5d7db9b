//! Closed-form optimal Gram matrices for linear kernels with no output noise.
//!
//! Both solvers work in the basis `S = C⁻¹ G_out C⁻ᵀ` with `C = chol(G_0)`, so
//! the eigenproblem for the non-symmetric `G_0⁻¹ G_out` becomes a symmetric
//! one and every `G_ℓ` comes out as `C U f_ℓ(Λ) Uᵀ Cᵀ`.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, DkmError, Result};
use crate::gram::GramMatrix;
use crate::linalg::{sym_eig, symmetrize, Chol};

#[derive(Clone, Debug)]
pub struct LinearSolution {
    /// `G_1 … G_L`.
    pub grams: Vec<GramMatrix>,
    /// `G_0⁻¹ G_1`.
    pub transfer: DMatrix<f64>,
}

struct Basis {
    c: DMatrix<f64>,
    u: DMatrix<f64>,
    lambda: DVector<f64>,
}

impl Basis {
    fn new(g0: &GramMatrix, gout: &GramMatrix) -> Result<Self> {
        if g0.p() != gout.p() {
            return Err(invalid(format!(
                "size mismatch: {} vs {}",
                g0.p(),
                gout.p()
            )));
        }
        let chol = Chol::named(g0.matrix(), "G_0")?;
        let s = symmetrize(&chol.solve_lower(&chol.solve_lower(gout.matrix()).transpose()));
        let (lambda, u) = sym_eig(&s)?;
        if let Some((i, v)) = lambda.iter().enumerate().find(|(_, v)| **v <= 0.0) {
            return Err(invalid(format!(
                "G_0⁻¹G_out has a non-positive eigenvalue {v:e} (index {i})"
            )));
        }
        Ok(Basis {
            c: chol.into_l(),
            u,
            lambda,
        })
    }

    /// `C U diag(d) Uᵀ Cᵀ`.
    fn gram(&self, d: &DVector<f64>) -> GramMatrix {
        let cu = &self.c * &self.u;
        let mut scaled = cu.clone();
        for (j, v) in d.iter().enumerate() {
            scaled.column_mut(j).scale_mut(*v);
        }
        GramMatrix::from_trusted(scaled * cu.transpose())
    }

    /// `C⁻ᵀ U diag(d) Uᵀ Cᵀ`, the similarity transform of `diag(d)`.
    fn transfer(&self, d: &DVector<f64>) -> DMatrix<f64> {
        let mut scaled = self.u.clone();
        for (j, v) in d.iter().enumerate() {
            scaled.column_mut(j).scale_mut(*v);
        }
        let right = scaled * (&self.c * &self.u).transpose();
        let mut out = right;
        self.c.tr_solve_lower_triangular_unchecked_mut(&mut out);
        out
    }
}

/// Equal widths: `G_ℓ = G_0 (G_0⁻¹ G_out)^{ℓ/(L+1)}`.
pub fn linear_equal_width(
    g0: &GramMatrix,
    gout: &GramMatrix,
    depth: usize,
) -> Result<LinearSolution> {
    if depth == 0 {
        return Err(invalid("depth must be at least 1"));
    }
    let basis = Basis::new(g0, gout)?;
    let steps = (depth + 1) as f64;
    let grams = (1..=depth)
        .map(|l| basis.gram(&basis.lambda.map(|v| v.powf(l as f64 / steps))))
        .collect();
    let transfer = basis.transfer(&basis.lambda.map(|v| v.powf(1.0 / steps)));
    Ok(LinearSolution { grams, transfer })
}

/// Arbitrary width ratios `ν_1 … ν_{L+1}`.
pub fn linear_general_width(
    g0: &GramMatrix,
    gout: &GramMatrix,
    nus: &[f64],
) -> Result<LinearSolution> {
    if nus.len() < 2 {
        return Err(invalid("need ν_1 … ν_{L+1} with L ≥ 1"));
    }
    if let Some(bad) = nus.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
        return Err(invalid(format!("width ratios must be positive, got {bad}")));
    }
    let basis = Basis::new(g0, gout)?;
    let nu_min = nus.iter().copied().fold(f64::INFINITY, f64::min);
    let offsets: Vec<f64> = nus.iter().map(|v| v - nu_min).collect();
    let prod: f64 = nus.iter().product();
    let mut d = DVector::zeros(basis.lambda.len());
    for (i, lam) in basis.lambda.iter().enumerate() {
        let root = solve_width_polynomial(prod * lam, &offsets).map_err(|e| match e {
            DkmError::Numerical(m) => DkmError::Numerical(format!("eigenvalue {i}: {m}")),
            other => other,
        })?;
        d[i] = root + nus[0] - nu_min;
    }
    // ν_ℓ G_{ℓ-1}⁻¹ G_ℓ = V (D + (ν_ℓ − ν_1) I) V⁻¹, so G_ℓ accumulates the
    // product of the per-layer diagonal factors.
    let depth = nus.len() - 1;
    let mut acc = DVector::from_element(d.len(), 1.0);
    let mut grams = Vec::with_capacity(depth);
    for nu in nus.iter().take(depth) {
        let step = d.map(|v| (v + nu - nus[0]) / nu);
        acc.component_mul_assign(&step);
        grams.push(basis.gram(&acc));
    }
    let transfer = basis.transfer(&(d / nus[0]));
    Ok(LinearSolution { grams, transfer })
}

/// Root `x ≥ 0` of `∏_ℓ (x + offsets_ℓ) = target`, where at least one offset is
/// zero so the product vanishes at `x = 0` and increases strictly after.
pub fn solve_width_polynomial(target: f64, offsets: &[f64]) -> Result<f64> {
    solve_width_polynomial_from(target, offsets, 0.0, 1.0)
}

/// As [`solve_width_polynomial`] but starting bisection from the bracket
/// `[lo, hi]`, which is widened as needed.
pub fn solve_width_polynomial_from(target: f64, offsets: &[f64], lo: f64, hi: f64) -> Result<f64> {
    if !(target > 0.0 && target.is_finite()) {
        return Err(DkmError::Numerical(format!(
            "no admissible root for target {target:e}"
        )));
    }
    let f = |x: f64| offsets.iter().map(|o| x + o).product::<f64>() - target;
    let df = |x: f64| {
        let mut s = 0.0;
        for k in 0..offsets.len() {
            s += offsets
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != k)
                .map(|(_, o)| x + o)
                .product::<f64>();
        }
        s
    };
    let (mut lo, mut hi) = (lo.max(0.0), hi.max(lo.max(0.0) + f64::MIN_POSITIVE));
    while f(lo) > 0.0 {
        lo /= 2.0;
        if lo < 1e-300 {
            lo = 0.0;
            break;
        }
    }
    let mut guard = 0;
    while f(hi) < 0.0 {
        hi = if hi <= 0.0 { 1.0 } else { hi * 2.0 };
        guard += 1;
        if guard > 2000 {
            return Err(DkmError::Numerical(
                "bracket expansion did not terminate".into(),
            ));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-9 * hi.max(1e-300) {
            break;
        }
    }
    let mut x = 0.5 * (lo + hi);
    for _ in 0..50 {
        let step = f(x) / df(x);
        let next = (x - step).clamp(lo.min(x), hi.max(x));
        let done = (next - x).abs() <= 1e-12 * next.abs().max(1e-300);
        x = next;
        if done {
            break;
        }
    }
    if !x.is_finite() || x < 0.0 {
        return Err(DkmError::Numerical(format!("root solve produced {x}")));
    }
    Ok(x)
}
