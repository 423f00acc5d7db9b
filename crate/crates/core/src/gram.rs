//! Gram matrices, feature matrices and width profiles.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, DkmError, Result};
use crate::linalg::{sym_eig, symmetrize, Chol, Tolerances};

/// A symmetric positive-semidefinite `P×P` second-moment matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix(DMatrix<f64>);

impl GramMatrix {
    /// Validates symmetry and positive semidefiniteness with default tolerances.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        Self::with_tolerances(m, &Tolerances::default())
    }

    pub fn with_tolerances(m: DMatrix<f64>, tol: &Tolerances) -> Result<Self> {
        check_gram(&m, tol)?;
        Ok(GramMatrix(symmetrize(&m)))
    }

    /// Wraps a matrix that is PSD by construction. The input is symmetrized but
    /// not eigen-checked.
    pub fn from_trusted(m: DMatrix<f64>) -> Self {
        debug_assert!(m.is_square());
        GramMatrix(symmetrize(&m))
    }

    pub fn identity(p: usize) -> Self {
        GramMatrix(DMatrix::identity(p, p))
    }

    pub fn p(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn mean_diag(&self) -> f64 {
        self.0.diagonal().mean()
    }

    pub fn chol(&self) -> Result<Chol> {
        Chol::named(&self.0, "Gram matrix")
    }

    /// Re-checks the invariants, e.g. after arithmetic done by a caller.
    pub fn validate(&self, tol: &Tolerances) -> Result<()> {
        check_gram(&self.0, tol)
    }
}

impl AsRef<DMatrix<f64>> for GramMatrix {
    fn as_ref(&self) -> &DMatrix<f64> {
        &self.0
    }
}

fn check_gram(m: &DMatrix<f64>, tol: &Tolerances) -> Result<()> {
    if !m.is_square() || m.nrows() == 0 {
        return Err(invalid(format!(
            "Gram matrix must be square and non-empty, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(invalid("Gram matrix has non-finite entries"));
    }
    let p = m.nrows();
    for i in 0..p {
        for j in (i + 1)..p {
            let (a, b) = (m[(i, j)], m[(j, i)]);
            if (a - b).abs() > tol.symmetry * a.abs().max(1.0) {
                return Err(invalid(format!("Gram matrix not symmetric at ({i}, {j})")));
            }
        }
    }
    let (vals, _) = sym_eig(m)?;
    let floor = -tol.psd * m.diagonal().mean().abs();
    if vals[0] < floor {
        return Err(invalid(format!(
            "Gram matrix not positive semidefinite (smallest eigenvalue {:e})",
            vals[0]
        )));
    }
    Ok(())
}

/// A `P×N` matrix of features with finite entries.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix(DMatrix<f64>);

impl FeatureMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() == 0 || m.ncols() == 0 {
            return Err(invalid("feature matrix must be non-empty"));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(invalid("feature matrix has non-finite entries"));
        }
        Ok(FeatureMatrix(m))
    }

    pub fn p(&self) -> usize {
        self.0.nrows()
    }

    pub fn width(&self) -> usize {
        self.0.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }
}

/// Width ratios `ν_0 … ν_{L+1}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct WidthProfile {
    nus: Vec<f64>,
}

impl WidthProfile {
    pub fn new(nus: Vec<f64>) -> Result<Self> {
        if nus.len() < 2 {
            return Err(invalid("width profile needs at least ν_0 and ν_out"));
        }
        if let Some(bad) = nus.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(invalid(format!("width ratios must be positive, got {bad}")));
        }
        Ok(WidthProfile { nus })
    }

    /// Same ratio `nu` for every hidden layer.
    pub fn uniform(input: f64, hidden: f64, depth: usize, output: f64) -> Result<Self> {
        let mut nus = vec![input];
        nus.extend(std::iter::repeat_n(hidden, depth));
        nus.push(output);
        Self::new(nus)
    }

    /// Number of hidden layers `L`.
    pub fn depth(&self) -> usize {
        self.nus.len() - 2
    }

    /// `ν_ℓ` for `ℓ = 0..=L+1`.
    pub fn nu(&self, layer: usize) -> f64 {
        self.nus[layer]
    }

    pub fn hidden(&self) -> &[f64] {
        &self.nus[1..self.nus.len() - 1]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.nus
    }
}

impl TryFrom<Vec<f64>> for WidthProfile {
    type Error = DkmError;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        WidthProfile::new(v)
    }
}

impl From<WidthProfile> for Vec<f64> {
    fn from(w: WidthProfile) -> Self {
        w.nus
    }
}

/// `(1/N) F Fᵀ`.
pub fn gram_from_features(f: &FeatureMatrix) -> GramMatrix {
    let m = f.matrix();
    GramMatrix::from_trusted(m * m.transpose() / m.ncols() as f64)
}

/// Squared distances `R_ij = G_ii − 2G_ij + G_jj`, clamped at zero.
pub fn sqdist(g: &GramMatrix) -> DMatrix<f64> {
    sqdist_raw(g.matrix())
}

pub(crate) fn sqdist_raw(g: &DMatrix<f64>) -> DMatrix<f64> {
    let p = g.nrows();
    DMatrix::from_fn(p, p, |i, j| {
        if i == j {
            0.0
        } else {
            (g[(i, i)] - 2.0 * g[(i, j)] + g[(j, j)]).max(0.0)
        }
    })
}

/// Element-wise root-mean-square difference.
pub fn gram_rmse(a: &GramMatrix, b: &GramMatrix) -> Result<f64> {
    if a.p() != b.p() {
        return Err(invalid(format!("size mismatch: {} vs {}", a.p(), b.p())));
    }
    Ok(matrix_rmse(a.matrix(), b.matrix()))
}

pub(crate) fn matrix_rmse(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    ((a - b).norm_squared() / a.len() as f64).sqrt()
}
