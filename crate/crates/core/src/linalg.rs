//! Dense linear algebra helpers: jittered Cholesky, symmetric eigendecomposition
//! and a handful of matrix utilities used throughout the crate.

use nalgebra::{DMatrix, DMatrixView, DMatrixViewMut, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, DkmError, Result};

/// Numerical tolerances. Every module uses [`Tolerances::default`] unless a
/// caller passes its own.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    /// Relative asymmetry allowed in a Gram matrix.
    pub symmetry: f64,
    /// Smallest eigenvalue allowed, relative to the mean diagonal.
    pub psd: f64,
    /// First jitter level, relative to the mean diagonal.
    pub jitter_start: f64,
    /// Last jitter level, relative to the mean diagonal.
    pub jitter_max: f64,
    pub jitter_attempts: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            symmetry: 1e-10,
            psd: 1e-8,
            jitter_start: 1e-10,
            jitter_max: 1e-6,
            jitter_attempts: 5,
        }
    }
}

impl Tolerances {
    /// Relative jitter levels tried in order.
    pub fn jitter_schedule(&self) -> Vec<f64> {
        let n = self.jitter_attempts.max(1);
        if n == 1 {
            return vec![self.jitter_start];
        }
        let ratio = (self.jitter_max / self.jitter_start).powf(1.0 / (n - 1) as f64);
        (0..n)
            .map(|k| self.jitter_start * ratio.powi(k as i32))
            .collect()
    }
}

/// Cholesky factor `L` of `A + jitter·I`.
#[derive(Clone, Debug)]
pub struct Chol {
    l: DMatrix<f64>,
    jitter: f64,
}

impl Chol {
    pub fn new(a: &DMatrix<f64>) -> Result<Self> {
        Self::with_tolerances(a, &Tolerances::default(), "matrix")
    }

    /// Factorize, naming the matrix in the error on failure.
    pub fn named(a: &DMatrix<f64>, what: &str) -> Result<Self> {
        Self::with_tolerances(a, &Tolerances::default(), what)
    }

    pub fn with_tolerances(a: &DMatrix<f64>, tol: &Tolerances, what: &str) -> Result<Self> {
        if !a.is_square() {
            return Err(invalid(format!("{what} is not square")));
        }
        let n = a.nrows();
        if n == 0 {
            return Err(invalid(format!("{what} is empty")));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(DkmError::Numerical(format!(
                "{what} has non-finite entries"
            )));
        }
        let scale = a.diagonal().mean();
        if scale <= 0.0 {
            return Err(DkmError::Factorization {
                what: what.to_string(),
                jitter: 0.0,
            });
        }
        // A clean factorization is tried first; jitter only kicks in on failure.
        let mut last = 0.0;
        for eps in std::iter::once(0.0).chain(tol.jitter_schedule()) {
            let jitter = eps * scale;
            last = jitter;
            let mut m = a.clone();
            for i in 0..n {
                m[(i, i)] += jitter;
            }
            if let Some(c) = nalgebra::Cholesky::new(m) {
                let l = c.unpack();
                // Pivots at rounding level mean the matrix is numerically singular.
                let min_pivot = l.diagonal().iter().fold(f64::INFINITY, |a, d| a.min(d * d));
                if eps > 0.0 || min_pivot > 1e-14 * scale {
                    return Ok(Chol { l, jitter });
                }
            }
        }
        Err(DkmError::Factorization {
            what: what.to_string(),
            jitter: last,
        })
    }

    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn into_l(self) -> DMatrix<f64> {
        self.l
    }

    /// Absolute amount added to the diagonal.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// `L⁻¹ B`.
    pub fn solve_lower(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        lower_solve(self.l.as_view(), x.as_view_mut());
        x
    }

    /// `A⁻¹ B`.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        lower_solve(self.l.as_view(), x.as_view_mut());
        lower_tr_solve(self.l.as_view(), x.as_view_mut());
        x
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.l.solve_lower_triangular_unchecked_mut(&mut x);
        self.l.tr_solve_lower_triangular_unchecked_mut(&mut x);
        x
    }

    /// `A⁻¹`, symmetrized.
    pub fn inverse(&self) -> DMatrix<f64> {
        let inv = self.solve(&DMatrix::identity(self.dim(), self.dim()));
        symmetrize(&inv)
    }

    /// `L Lᵀ`, i.e. the factorized matrix including jitter.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.l * self.l.transpose()
    }
}

const SOLVE_BLOCK: usize = 48;

// Recursive blocked triangular solves: the off-diagonal updates go through
// gemm, which is much faster than column-by-column substitution.
fn lower_solve(l: DMatrixView<f64>, mut x: DMatrixViewMut<f64>) {
    let n = l.nrows();
    if n <= SOLVE_BLOCK || x.ncols() < 8 {
        l.solve_lower_triangular_unchecked_mut(&mut x);
        return;
    }
    let k = n / 2;
    let (mut top, mut bottom) = x.rows_range_pair_mut(0..k, k..n);
    lower_solve(l.view((0, 0), (k, k)), top.as_view_mut());
    bottom.gemm(-1.0, &l.view((k, 0), (n - k, k)), &top, 1.0);
    lower_solve(l.view((k, k), (n - k, n - k)), bottom);
}

/// Solves `Lᵀ X = B` in place.
fn lower_tr_solve(l: DMatrixView<f64>, mut x: DMatrixViewMut<f64>) {
    let n = l.nrows();
    if n <= SOLVE_BLOCK || x.ncols() < 8 {
        l.tr_solve_lower_triangular_unchecked_mut(&mut x);
        return;
    }
    let k = n / 2;
    let (mut top, mut bottom) = x.rows_range_pair_mut(0..k, k..n);
    lower_tr_solve(l.view((k, k), (n - k, n - k)), bottom.as_view_mut());
    top.gemm(-1.0, &l.view((k, 0), (n - k, k)).transpose(), &bottom, 1.0);
    lower_tr_solve(l.view((0, 0), (k, k)), top);
}

/// Symmetric eigendecomposition with eigenvalues sorted ascending.
pub fn sym_eig(a: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if !a.is_square() {
        return Err(invalid("eigendecomposition needs a square matrix"));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(DkmError::Numerical(
            "eigendecomposition of a matrix with non-finite entries".into(),
        ));
    }
    let n = a.nrows();
    let eig = SymmetricEigen::try_new(symmetrize(a), f64::EPSILON, 100 * n.max(10))
        .ok_or_else(|| DkmError::Numerical("symmetric eigensolver did not converge".into()))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        vectors.set_column(k, &eig.eigenvectors.column(i));
    }
    Ok((values, vectors))
}

/// Applies a scalar function to the eigenvalues of a symmetric matrix.
pub fn sym_fn(a: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> Result<DMatrix<f64>> {
    let (vals, vecs) = sym_eig(a)?;
    let mut scaled = vecs.clone();
    for (j, v) in vals.iter().enumerate() {
        let fv = f(*v);
        scaled.column_mut(j).scale_mut(fv);
    }
    Ok(symmetrize(&(scaled * vecs.transpose())))
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// `tr(A B)` without forming the product.
pub fn trace_prod(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.component_mul(&b.transpose()).sum()
}

pub fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

pub(crate) fn add_diag(a: &mut DMatrix<f64>, v: f64) {
    for i in 0..a.nrows().min(a.ncols()) {
        a[(i, i)] += v;
    }
}
