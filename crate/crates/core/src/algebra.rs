//! Dense linear algebra, the time grid and quadrature of the memory integral.
//!
//! Matrices and vectors are plain `nalgebra` dense types. The SPD solve is a
//! hand-rolled Cholesky factorization so that the pivot rule (relative to the
//! largest diagonal entry) is under our control.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type DenseMatrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Pivots below this fraction of the largest diagonal entry are rejected.
pub const PIVOT_TOLERANCE: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AlgebraError {
    #[error("matrix is not symmetric positive definite (pivot {pivot:e} at row {row})")]
    NotSpd { row: usize, pivot: f64 },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("matrix is singular")]
    Singular,
    #[error("history has {available} entries but step {step} was requested")]
    EmptyHistory { step: usize, available: usize },
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),
}

/// Uniform grid `0 = t_0 < t_1 < ... < t_M = T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    t_end: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(t_end: f64, steps: usize) -> Result<Self, AlgebraError> {
        if !(t_end.is_finite() && t_end > 0.0) {
            return Err(AlgebraError::InvalidGrid(format!("t_end must be positive, got {t_end}")));
        }
        if steps == 0 {
            return Err(AlgebraError::InvalidGrid("steps must be at least 1".into()));
        }
        Ok(Self { t_end, steps })
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.t_end / self.steps as f64
    }

    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Node `n`; the last node is returned as exactly `t_end`.
    pub fn node(&self, n: usize) -> f64 {
        if n == self.steps {
            self.t_end
        } else {
            n as f64 * self.dt()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.steps).map(|n| self.node(n)).collect()
    }

    /// Composite trapezoid weights over the whole interval.
    pub fn trapezoid_weights(&self) -> Vec<f64> {
        let dt = self.dt();
        (0..=self.steps)
            .map(|n| if n == 0 || n == self.steps { 0.5 * dt } else { dt })
            .collect()
    }
}

/// Time quadrature for the memory integral.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quadrature {
    /// Nodes `0..n-1` with weight `dt`; the current step does not enter.
    LeftRectangle,
    /// Nodes `0..n` with end weights `dt/2`.
    #[default]
    Trapezoid,
}

impl Quadrature {
    /// Weight (in units of `dt`) of history node `k` in the integral up to node `n`.
    pub fn weight(self, k: usize, n: usize) -> f64 {
        debug_assert!(k <= n);
        match self {
            Quadrature::LeftRectangle => {
                if k < n {
                    1.0
                } else {
                    0.0
                }
            }
            Quadrature::Trapezoid => {
                if n == 0 {
                    0.0
                } else if k == 0 || k == n {
                    0.5
                } else {
                    1.0
                }
            }
        }
    }

    /// Weight of the current node, which couples the step implicitly.
    pub fn self_weight(self, n: usize) -> f64 {
        self.weight(n, n)
    }
}

/// Cholesky factor `A = L Lᵀ` of a symmetric positive definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky {
    lower: DenseMatrix,
}

impl Cholesky {
    pub fn factor(a: &DenseMatrix) -> Result<Self, AlgebraError> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(AlgebraError::DimensionMismatch { expected: n, found: a.ncols() });
        }
        let max_diag = (0..n).map(|i| a[(i, i)].abs()).fold(0.0, f64::max);
        let threshold = PIVOT_TOLERANCE * max_diag;
        let mut lower = DenseMatrix::zeros(n, n);
        for j in 0..n {
            let mut pivot = a[(j, j)];
            for k in 0..j {
                pivot -= lower[(j, k)] * lower[(j, k)];
            }
            if !(pivot > threshold) || max_diag == 0.0 {
                return Err(AlgebraError::NotSpd { row: j, pivot });
            }
            let diag = pivot.sqrt();
            lower[(j, j)] = diag;
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= lower[(i, k)] * lower[(j, k)];
                }
                lower[(i, j)] = s / diag;
            }
        }
        Ok(Self { lower })
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    pub fn lower(&self) -> &DenseMatrix {
        &self.lower
    }

    /// Solves `L y = b` in place.
    pub fn forward_substitute(&self, b: &mut Vector) {
        let n = self.dim();
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.lower[(i, k)] * b[k];
            }
            b[i] = s / self.lower[(i, i)];
        }
    }

    /// Solves `Lᵀ x = y` in place.
    pub fn backward_substitute(&self, y: &mut Vector) {
        let n = self.dim();
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= self.lower[(k, i)] * y[k];
            }
            y[i] = s / self.lower[(i, i)];
        }
    }

    pub fn solve(&self, b: &Vector) -> Result<Vector, AlgebraError> {
        if b.len() != self.dim() {
            return Err(AlgebraError::DimensionMismatch { expected: self.dim(), found: b.len() });
        }
        let mut x = b.clone();
        self.forward_substitute(&mut x);
        self.backward_substitute(&mut x);
        Ok(x)
    }

    /// Solves for every column of `b`.
    pub fn solve_matrix(&self, b: &DenseMatrix) -> Result<DenseMatrix, AlgebraError> {
        let mut out = DenseMatrix::zeros(b.nrows(), b.ncols());
        for j in 0..b.ncols() {
            let col = self.solve(&b.column(j).into_owned())?;
            out.set_column(j, &col);
        }
        Ok(out)
    }
}

/// Solves `A x = b` for symmetric positive definite `A`.
pub fn spd_solve(a: &DenseMatrix, b: &Vector) -> Result<Vector, AlgebraError> {
    if a.nrows() != b.len() {
        return Err(AlgebraError::DimensionMismatch { expected: a.nrows(), found: b.len() });
    }
    Cholesky::factor(a)?.solve(b)
}

/// Factorization used for possibly nonsymmetric principal blocks.
#[derive(Debug, Clone)]
pub enum Factorization {
    Cholesky(Cholesky),
    Lu(nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>),
}

impl Factorization {
    /// Cholesky when `a` is symmetric to round-off, partial-pivot LU otherwise.
    pub fn new(a: &DenseMatrix) -> Result<Self, AlgebraError> {
        if is_symmetric(a, 1e-13) {
            Ok(Factorization::Cholesky(Cholesky::factor(a)?))
        } else {
            let lu = a.clone().lu();
            if !lu.is_invertible() {
                return Err(AlgebraError::Singular);
            }
            Ok(Factorization::Lu(lu))
        }
    }

    pub fn solve(&self, b: &Vector) -> Result<Vector, AlgebraError> {
        match self {
            Factorization::Cholesky(c) => c.solve(b),
            Factorization::Lu(lu) => lu.solve(b).ok_or(AlgebraError::Singular),
        }
    }

    pub fn solve_matrix(&self, b: &DenseMatrix) -> Result<DenseMatrix, AlgebraError> {
        match self {
            Factorization::Cholesky(c) => c.solve_matrix(b),
            Factorization::Lu(lu) => lu.solve(b).ok_or(AlgebraError::Singular),
        }
    }
}

pub fn is_symmetric(a: &DenseMatrix, rel_tol: f64) -> bool {
    if a.nrows() != a.ncols() {
        return false;
    }
    let scale = a.amax().max(f64::MIN_POSITIVE);
    (0..a.nrows()).all(|i| (0..i).all(|j| (a[(i, j)] - a[(j, i)]).abs() <= rel_tol * scale))
}

pub fn symmetric_part(a: &DenseMatrix) -> DenseMatrix {
    (a + a.transpose()) * 0.5
}

/// Smallest eigenvalue of the symmetric part of `a`.
pub fn min_symmetric_eigenvalue(a: &DenseMatrix) -> f64 {
    if a.nrows() == 0 {
        return f64::INFINITY;
    }
    SymmetricEigen::new(symmetric_part(a)).eigenvalues.min()
}

/// Induced Euclidean operator norm (largest singular value).
pub fn operator_norm(a: &DenseMatrix) -> f64 {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0.0;
    }
    let gram = a.transpose() * a;
    SymmetricEigen::new(gram).eigenvalues.max().max(0.0).sqrt()
}

/// Smallest `λ` with `sym(a) x = λ m x`, for SPD `m` given by its Cholesky factor.
pub fn min_generalized_eigenvalue(a: &DenseMatrix, m: &Cholesky) -> Result<f64, AlgebraError> {
    let n = m.dim();
    if a.nrows() != n || a.ncols() != n {
        return Err(AlgebraError::DimensionMismatch { expected: n, found: a.nrows() });
    }
    // L⁻¹ sym(a) L⁻ᵀ, built column by column.
    let s = symmetric_part(a);
    let mut half = DenseMatrix::zeros(n, n);
    for j in 0..n {
        let mut col = s.column(j).into_owned();
        m.forward_substitute(&mut col);
        half.set_row(j, &col.transpose());
    }
    let mut reduced = DenseMatrix::zeros(n, n);
    for j in 0..n {
        let mut col = half.column(j).into_owned();
        m.forward_substitute(&mut col);
        reduced.set_column(j, &col);
    }
    Ok(SymmetricEigen::new(symmetric_part(&reduced)).eigenvalues.min())
}

/// Quadrature of `∫_0^{t_n} R(t_n − s) ε(s) ds` from kernel samples at grid lags.
///
/// `lags[k]` must hold `R(k·dt)` for `k = 0..=n`; `history[k]` the strain at node `k`.
pub fn memory_integral_sampled(
    lags: &[DenseMatrix],
    history: &[Vector],
    grid: &TimeGrid,
    n: usize,
    rule: Quadrature,
) -> Result<Vector, AlgebraError> {
    let dim = strain_dim(lags, history);
    let mut out = Vector::zeros(dim);
    if n == 0 {
        return Ok(out);
    }
    let needed = match rule {
        Quadrature::LeftRectangle => n,
        Quadrature::Trapezoid => n + 1,
    };
    if history.len() < needed {
        return Err(AlgebraError::EmptyHistory { step: n, available: history.len() });
    }
    if lags.len() <= n {
        return Err(AlgebraError::DimensionMismatch { expected: n + 1, found: lags.len() });
    }
    let dt = grid.dt();
    for (k, strain) in history.iter().enumerate().take(n + 1) {
        let w = rule.weight(k, n);
        if w == 0.0 {
            continue;
        }
        out.gemv(w * dt, &lags[n - k], strain, 1.0);
    }
    Ok(out)
}

/// Same as [`memory_integral_sampled`] with the kernel given as an evaluator.
pub fn memory_integral<K>(
    kernel: K,
    history: &[Vector],
    grid: &TimeGrid,
    n: usize,
    rule: Quadrature,
) -> Result<Vector, AlgebraError>
where
    K: Fn(f64) -> DenseMatrix,
{
    let lags: Vec<DenseMatrix> = (0..=n).map(|k| kernel(grid.node(k))).collect();
    memory_integral_sampled(&lags, history, grid, n, rule)
}

fn strain_dim(lags: &[DenseMatrix], history: &[Vector]) -> usize {
    lags.first()
        .map(|m| m.nrows())
        .or_else(|| history.first().map(|v| v.len()))
        .unwrap_or(0)
}
