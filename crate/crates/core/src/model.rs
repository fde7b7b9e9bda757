//! Problem data: the discrete displacement space, the admissible set, the
//! compliance law, the relaxation kernel, the load history and the constants
//! derived from them.

use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::algebra::{
    min_generalized_eigenvalue, operator_norm, AlgebraError, Cholesky, DenseMatrix, Quadrature, TimeGrid,
    Vector,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error(transparent)]
    Algebra(#[from] AlgebraError),
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch { what: String, expected: usize, found: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("quadrature weights must be strictly positive (index {0})")]
    NonPositiveWeight(usize),
    #[error("V metric is not positive definite: {0}")]
    MetricNotSpd(AlgebraError),
    #[error("operator is not coercive: m_B = {0:e}")]
    NotCoercive(f64),
    #[error("dof {dof} out of range for {n_dof} dofs")]
    DofOutOfRange { dof: usize, n_dof: usize },
    #[error("dof {0} is listed twice")]
    DuplicateDof(usize),
    #[error("invalid compliance law: {0}")]
    InvalidCompliance(String),
    #[error("invalid kernel: {0}")]
    InvalidKernel(String),
    #[error("kernel samples at t={t} differ by {jump:e}, above the declared modulus {modulus:e}")]
    KernelModulusExceeded { t: f64, jump: f64, modulus: f64 },
    #[error("invalid load: {0}")]
    InvalidLoad(String),
    #[error("rod example needs at least one element")]
    EmptyMesh,
}

fn mismatch(what: &str, expected: usize, found: usize) -> ModelError {
    ModelError::DimensionMismatch { what: what.to_string(), expected, found }
}

fn all_finite(m: &DenseMatrix) -> bool {
    m.iter().all(|x| x.is_finite())
}

/// Galerkin space: strain map `D`, quadrature weights `w` and metric `G = Dᵀ diag(w) D`.
#[derive(Debug, Clone)]
pub struct DiscreteSpace {
    strain_map: DenseMatrix,
    q_weights: Vector,
    /// `Dᵀ diag(w)`, so that `ε*(η) = adjoint · η`.
    adjoint: DenseMatrix,
    metric: DenseMatrix,
    metric_factor: Cholesky,
}

impl DiscreteSpace {
    pub fn new(strain_map: DenseMatrix, q_weights: Vector) -> Result<Self, ModelError> {
        if strain_map.nrows() != q_weights.len() {
            return Err(mismatch("q_weights", strain_map.nrows(), q_weights.len()));
        }
        if !all_finite(&strain_map) {
            return Err(ModelError::NonFinite("strain map".into()));
        }
        if let Some(i) = q_weights.iter().position(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(ModelError::NonPositiveWeight(i));
        }
        let mut adjoint = strain_map.transpose();
        for (j, w) in q_weights.iter().enumerate() {
            adjoint.column_mut(j).scale_mut(*w);
        }
        let metric = &adjoint * &strain_map;
        let metric_factor = Cholesky::factor(&metric).map_err(ModelError::MetricNotSpd)?;
        Ok(Self { strain_map, q_weights, adjoint, metric, metric_factor })
    }

    pub fn n_dof(&self) -> usize {
        self.strain_map.ncols()
    }

    pub fn n_strain(&self) -> usize {
        self.strain_map.nrows()
    }

    pub fn strain_map(&self) -> &DenseMatrix {
        &self.strain_map
    }

    pub fn q_weights(&self) -> &Vector {
        &self.q_weights
    }

    pub fn metric(&self) -> &DenseMatrix {
        &self.metric
    }

    pub fn metric_factor(&self) -> &Cholesky {
        &self.metric_factor
    }

    pub fn strain(&self, u: &Vector) -> Vector {
        &self.strain_map * u
    }

    /// `ε*(η) = Dᵀ (w ∘ η)`, the assembled dual vector of a strain field.
    pub fn adjoint_strain(&self, eta: &Vector) -> Vector {
        &self.adjoint * eta
    }

    /// Assembles `Dᵀ diag(w) M D` for a strain-space operator `M`.
    pub fn assemble(&self, m: &DenseMatrix) -> DenseMatrix {
        &self.adjoint * (m * &self.strain_map)
    }

    pub fn v_inner(&self, a: &Vector, b: &Vector) -> f64 {
        a.dot(&(&self.metric * b))
    }

    pub fn v_norm(&self, u: &Vector) -> f64 {
        self.v_inner(u, u).max(0.0).sqrt()
    }

    /// Riesz representative `G⁻¹ω` of an assembled dual vector.
    pub fn riesz(&self, omega: &Vector) -> Result<Vector, AlgebraError> {
        self.metric_factor.solve(omega)
    }

    /// `sqrt(ωᵀ G⁻¹ ω)`.
    pub fn dual_norm(&self, omega: &Vector) -> Result<f64, AlgebraError> {
        Ok(omega.dot(&self.riesz(omega)?).max(0.0).sqrt())
    }

    /// Induced operator norm of a strain-space matrix in the Q inner product.
    pub fn q_operator_norm(&self, m: &DenseMatrix) -> f64 {
        let mut scaled = m.clone();
        for i in 0..scaled.nrows() {
            let si = self.q_weights[i].sqrt();
            for j in 0..scaled.ncols() {
                scaled[(i, j)] *= si / self.q_weights[j].sqrt();
            }
        }
        operator_norm(&scaled)
    }
}

/// Box-type admissible set `{v : v_i ≤ g_i for the listed dofs}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSet {
    n_dof: usize,
    bounded: Vec<(usize, f64)>,
    upper: Vec<Option<f64>>,
    zero_feasible: bool,
}

impl ConstraintSet {
    pub fn new(n_dof: usize, mut bounded: Vec<(usize, f64)>) -> Result<Self, ModelError> {
        bounded.sort_by_key(|(dof, _)| *dof);
        let mut upper = vec![None; n_dof];
        for &(dof, g) in &bounded {
            if dof >= n_dof {
                return Err(ModelError::DofOutOfRange { dof, n_dof });
            }
            if !g.is_finite() {
                return Err(ModelError::NonFinite(format!("upper bound of dof {dof}")));
            }
            if upper[dof].is_some() {
                return Err(ModelError::DuplicateDof(dof));
            }
            upper[dof] = Some(g);
        }
        let zero_feasible = bounded.iter().all(|&(_, g)| g >= 0.0);
        Ok(Self { n_dof, bounded, upper, zero_feasible })
    }

    pub fn unconstrained(n_dof: usize) -> Self {
        Self { n_dof, bounded: Vec::new(), upper: vec![None; n_dof], zero_feasible: true }
    }

    pub fn n_dof(&self) -> usize {
        self.n_dof
    }

    /// Bounded dofs in increasing index order.
    pub fn bounded(&self) -> &[(usize, f64)] {
        &self.bounded
    }

    pub fn upper(&self, dof: usize) -> Option<f64> {
        self.upper[dof]
    }

    pub fn zero_feasible(&self) -> bool {
        self.zero_feasible
    }

    pub fn project(&self, v: &Vector) -> Vector {
        let mut out = v.clone();
        for &(dof, g) in &self.bounded {
            out[dof] = out[dof].min(g);
        }
        out
    }

    /// Largest violation `v_i − g_i` over bounded dofs (non-positive when feasible).
    pub fn max_violation(&self, v: &Vector) -> f64 {
        self.bounded.iter().map(|&(dof, g)| v[dof] - g).fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Scalar normal compliance function, zero for non-positive penetration.
#[derive(Debug, Clone, PartialEq)]
pub enum ComplianceFunction {
    /// `p(r) = c·r₊`.
    Linear { stiffness: f64 },
    /// Continuous, piecewise linear: `slopes[0]` on `(0, breakpoints[0]]`,
    /// `slopes[i]` on `(breakpoints[i-1], breakpoints[i]]`, the last slope beyond.
    PiecewiseLinear { breakpoints: Vec<f64>, slopes: Vec<f64> },
}

impl ComplianceFunction {
    pub fn validate(&self) -> Result<(), ModelError> {
        match self {
            ComplianceFunction::Linear { stiffness } => {
                if !(stiffness.is_finite() && *stiffness >= 0.0) {
                    return Err(ModelError::InvalidCompliance(format!("stiffness must be ≥ 0, got {stiffness}")));
                }
            }
            ComplianceFunction::PiecewiseLinear { breakpoints, slopes } => {
                if slopes.len() != breakpoints.len() + 1 {
                    return Err(ModelError::InvalidCompliance(format!(
                        "{} breakpoints need {} slopes, got {}",
                        breakpoints.len(),
                        breakpoints.len() + 1,
                        slopes.len()
                    )));
                }
                if slopes.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
                    return Err(ModelError::InvalidCompliance("slopes must be finite and ≥ 0".into()));
                }
                let mut prev = 0.0;
                for &b in breakpoints {
                    if !(b.is_finite() && b > prev) {
                        return Err(ModelError::InvalidCompliance(
                            "breakpoints must be positive and strictly increasing".into(),
                        ));
                    }
                    prev = b;
                }
            }
        }
        Ok(())
    }

    pub fn value(&self, r: f64) -> f64 {
        if r <= 0.0 {
            return 0.0;
        }
        match self {
            ComplianceFunction::Linear { stiffness } => stiffness * r,
            ComplianceFunction::PiecewiseLinear { breakpoints, slopes } => {
                let mut acc = 0.0;
                let mut left = 0.0;
                for (i, &b) in breakpoints.iter().enumerate() {
                    if r <= b {
                        return acc + slopes[i] * (r - left);
                    }
                    acc += slopes[i] * (b - left);
                    left = b;
                }
                acc + slopes[breakpoints.len()] * (r - left)
            }
        }
    }

    /// One-sided directional derivative `p′(r; δ)`.
    pub fn directional_derivative(&self, r: f64, delta: f64) -> f64 {
        match self {
            ComplianceFunction::Linear { stiffness } => {
                if r > 0.0 {
                    stiffness * delta
                } else if r == 0.0 {
                    stiffness * delta.max(0.0)
                } else {
                    0.0
                }
            }
            ComplianceFunction::PiecewiseLinear { breakpoints, slopes } => {
                if r < 0.0 {
                    return 0.0;
                }
                // slope to the right and to the left of r
                let right_idx = breakpoints.iter().take_while(|&&b| b <= r).count();
                let left_slope = if r == 0.0 {
                    0.0
                } else {
                    slopes[breakpoints.iter().take_while(|&&b| b < r).count()]
                };
                if delta >= 0.0 {
                    slopes[right_idx] * delta
                } else {
                    left_slope * delta
                }
            }
        }
    }

    pub fn lipschitz(&self) -> f64 {
        match self {
            ComplianceFunction::Linear { stiffness } => *stiffness,
            ComplianceFunction::PiecewiseLinear { slopes, .. } => slopes.iter().copied().fold(0.0, f64::max),
        }
    }

    /// True when `p′(r; ·)` is linear at `r`.
    pub fn is_smooth_at(&self, r: f64) -> bool {
        match self {
            ComplianceFunction::Linear { stiffness } => r != 0.0 || *stiffness == 0.0,
            ComplianceFunction::PiecewiseLinear { .. } => {
                self.directional_derivative(r, 1.0) == -self.directional_derivative(r, -1.0)
            }
        }
    }
}

/// Contact dof carrying the compliance law with a lumped surface weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contact {
    pub dof: usize,
    pub weight: f64,
}

/// The operator `P(u)_dof = weight · p(u_dof)` over the contact dofs.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplianceLaw {
    function: ComplianceFunction,
    contacts: Vec<Contact>,
}

impl ComplianceLaw {
    pub fn new(n_dof: usize, function: ComplianceFunction, mut contacts: Vec<Contact>) -> Result<Self, ModelError> {
        function.validate()?;
        contacts.sort_by_key(|c| c.dof);
        for pair in contacts.windows(2) {
            if pair[0].dof == pair[1].dof {
                return Err(ModelError::DuplicateDof(pair[0].dof));
            }
        }
        for c in &contacts {
            if c.dof >= n_dof {
                return Err(ModelError::DofOutOfRange { dof: c.dof, n_dof });
            }
            if !(c.weight.is_finite() && c.weight >= 0.0) {
                return Err(ModelError::InvalidCompliance(format!("weight of dof {} must be ≥ 0", c.dof)));
            }
        }
        Ok(Self { function, contacts })
    }

    pub fn none() -> Self {
        Self { function: ComplianceFunction::Linear { stiffness: 0.0 }, contacts: Vec::new() }
    }

    pub fn function(&self) -> &ComplianceFunction {
        &self.function
    }

    pub fn contacts(&self) -> &[Contact] {
        &self.contacts
    }

    /// True when `P ≡ 0`.
    pub fn is_zero(&self) -> bool {
        self.contacts.is_empty() || self.function.lipschitz() == 0.0 || self.max_weight() == 0.0
    }

    pub fn lipschitz(&self) -> f64 {
        self.function.lipschitz()
    }

    pub fn max_weight(&self) -> f64 {
        self.contacts.iter().map(|c| c.weight).fold(0.0, f64::max)
    }

    pub fn apply(&self, u: &Vector) -> Vector {
        let mut out = Vector::zeros(u.len());
        for c in &self.contacts {
            out[c.dof] = c.weight * self.function.value(u[c.dof]);
        }
        out
    }

    /// `P′(u; δ)`.
    pub fn directional_derivative(&self, u: &Vector, delta: &Vector) -> Vector {
        let mut out = Vector::zeros(u.len());
        for c in &self.contacts {
            out[c.dof] = c.weight * self.function.directional_derivative(u[c.dof], delta[c.dof]);
        }
        out
    }
}

/// Relaxation kernel `t ↦ R(t)` acting on strain vectors.
#[derive(Debug, Clone, PartialEq)]
pub enum KernelKind {
    Zero { dim: usize },
    Constant(DenseMatrix),
    /// `R(t) = M e^{-rate·t}`.
    Exponential { matrix: DenseMatrix, rate: f64 },
    /// Piecewise-linear interpolation of tabulated samples, constant outside the table.
    Table { times: Vec<f64>, matrices: Vec<DenseMatrix> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelaxationKernel {
    kind: KernelKind,
    /// Declared bound on the Q-norm jump between adjacent grid samples.
    modulus: Option<f64>,
}

impl RelaxationKernel {
    pub fn new(kind: KernelKind, modulus: Option<f64>) -> Result<Self, ModelError> {
        match &kind {
            KernelKind::Zero { .. } => {}
            KernelKind::Constant(m) => {
                if !all_finite(m) {
                    return Err(ModelError::NonFinite("kernel matrix".into()));
                }
            }
            KernelKind::Exponential { matrix, rate } => {
                if !all_finite(matrix) || !rate.is_finite() {
                    return Err(ModelError::NonFinite("exponential kernel".into()));
                }
            }
            KernelKind::Table { times, matrices } => {
                if times.is_empty() || times.len() != matrices.len() {
                    return Err(ModelError::InvalidKernel(format!(
                        "{} times but {} matrices",
                        times.len(),
                        matrices.len()
                    )));
                }
                if times.windows(2).any(|w| !(w[1] > w[0])) || times.iter().any(|t| !t.is_finite()) {
                    return Err(ModelError::InvalidKernel("table times must be strictly increasing".into()));
                }
                let dim = matrices[0].nrows();
                for (i, m) in matrices.iter().enumerate() {
                    if m.nrows() != dim || m.ncols() != dim {
                        return Err(ModelError::InvalidKernel(format!(
                            "table matrix {i} is {}x{}, expected {dim}x{dim}",
                            m.nrows(),
                            m.ncols()
                        )));
                    }
                    if !all_finite(m) {
                        return Err(ModelError::NonFinite(format!("kernel table matrix {i}")));
                    }
                }
            }
        }
        let square = match &kind {
            KernelKind::Constant(m) | KernelKind::Exponential { matrix: m, .. } => m.ncols() == m.nrows(),
            _ => true,
        };
        if !square {
            return Err(ModelError::InvalidKernel("kernel matrix must be square".into()));
        }
        if let Some(m) = modulus {
            if !(m.is_finite() && m >= 0.0) {
                return Err(ModelError::InvalidKernel("modulus must be ≥ 0".into()));
            }
        }
        Ok(Self { kind, modulus })
    }

    pub fn zero(dim: usize) -> Self {
        Self { kind: KernelKind::Zero { dim }, modulus: None }
    }

    pub fn constant(m: DenseMatrix) -> Result<Self, ModelError> {
        Self::new(KernelKind::Constant(m), None)
    }

    pub fn kind(&self) -> &KernelKind {
        &self.kind
    }

    pub fn modulus(&self) -> Option<f64> {
        self.modulus
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            KernelKind::Zero { dim } => *dim,
            KernelKind::Constant(m) | KernelKind::Exponential { matrix: m, .. } => m.nrows(),
            KernelKind::Table { matrices, .. } => matrices[0].nrows(),
        }
    }

    pub fn is_zero(&self) -> bool {
        match &self.kind {
            KernelKind::Zero { .. } => true,
            KernelKind::Constant(m) | KernelKind::Exponential { matrix: m, .. } => m.iter().all(|x| *x == 0.0),
            KernelKind::Table { matrices, .. } => matrices.iter().all(|m| m.iter().all(|x| *x == 0.0)),
        }
    }

    pub fn evaluate(&self, t: f64) -> DenseMatrix {
        match &self.kind {
            KernelKind::Zero { dim } => DenseMatrix::zeros(*dim, *dim),
            KernelKind::Constant(m) => m.clone(),
            KernelKind::Exponential { matrix, rate } => matrix * (-rate * t).exp(),
            KernelKind::Table { times, matrices } => {
                let last = times.len() - 1;
                if t <= times[0] {
                    return matrices[0].clone();
                }
                if t >= times[last] {
                    return matrices[last].clone();
                }
                let j = times.partition_point(|&s| s <= t);
                let (t0, t1) = (times[j - 1], times[j]);
                let theta = (t - t0) / (t1 - t0);
                &matrices[j - 1] * (1.0 - theta) + &matrices[j] * theta
            }
        }
    }
}

/// Assembled dual load vectors at the grid nodes; linear in between.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadHistory {
    grid: TimeGrid,
    values: Vec<Vector>,
}

impl LoadHistory {
    pub fn new(grid: TimeGrid, values: Vec<Vector>) -> Result<Self, ModelError> {
        if values.len() != grid.len() {
            return Err(mismatch("load nodes", grid.len(), values.len()));
        }
        let dim = values[0].len();
        for (n, v) in values.iter().enumerate() {
            if v.len() != dim {
                return Err(mismatch("load vector", dim, v.len()));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(ModelError::NonFinite(format!("load at node {n}")));
            }
        }
        Ok(Self { grid, values })
    }

    pub fn from_fn<F: Fn(f64) -> Vector>(grid: TimeGrid, f: F) -> Result<Self, ModelError> {
        Self::new(grid, grid.nodes().into_iter().map(f).collect())
    }

    pub fn constant(grid: TimeGrid, v: Vector) -> Self {
        Self { grid, values: vec![v; grid.len()] }
    }

    pub fn zeros(grid: TimeGrid, n_dof: usize) -> Self {
        Self::constant(grid, Vector::zeros(n_dof))
    }

    /// Samples a tabulated load (linear interpolation, constant extension) on `grid`.
    pub fn from_table(grid: TimeGrid, times: &[f64], table: &[Vector]) -> Result<Self, ModelError> {
        if times.is_empty() || times.len() != table.len() {
            return Err(ModelError::InvalidLoad(format!("{} times but {} vectors", times.len(), table.len())));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(ModelError::InvalidLoad("table times must be strictly increasing".into()));
        }
        let last = times.len() - 1;
        Self::from_fn(grid, |t| {
            if t <= times[0] {
                table[0].clone()
            } else if t >= times[last] {
                table[last].clone()
            } else {
                let j = times.partition_point(|&s| s <= t);
                let theta = (t - times[j - 1]) / (times[j] - times[j - 1]);
                &table[j - 1] * (1.0 - theta) + &table[j] * theta
            }
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.values[0].len()
    }

    pub fn at(&self, n: usize) -> &Vector {
        &self.values[n]
    }

    pub fn values(&self) -> &[Vector] {
        &self.values
    }

    /// Linear interpolation between nodes.
    pub fn at_time(&self, t: f64) -> Vector {
        let dt = self.grid.dt();
        let s = (t / dt).clamp(0.0, self.grid.steps() as f64);
        let n = (s.floor() as usize).min(self.grid.steps());
        if n == self.grid.steps() {
            return self.values[n].clone();
        }
        let theta = s - n as f64;
        &self.values[n] * (1.0 - theta) + &self.values[n + 1] * theta
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self { grid: self.grid, values: self.values.iter().map(|v| v * a).collect() }
    }

    /// `self + a·other`.
    pub fn axpy(&self, a: f64, other: &LoadHistory) -> Self {
        Self {
            grid: self.grid,
            values: self.values.iter().zip(&other.values).map(|(x, y)| x + y * a).collect(),
        }
    }

    /// `max_n ‖f_n‖_{V*}`.
    pub fn c_dual_norm(&self, space: &DiscreteSpace) -> Result<f64, AlgebraError> {
        let mut best: f64 = 0.0;
        for v in &self.values {
            best = best.max(space.dual_norm(v)?);
        }
        Ok(best)
    }
}

/// Numerical knobs that belong to the problem rather than to a single solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProblemOptions {
    pub quadrature: Quadrature,
    /// Multiplies the sampled kernel norm.
    pub safety_factor: f64,
}

impl Default for ProblemOptions {
    fn default() -> Self {
        Self { quadrature: Quadrature::Trapezoid, safety_factor: 1.0 }
    }
}

/// A complete discrete instance.
#[derive(Debug, Clone)]
pub struct HdviProblem {
    space: DiscreteSpace,
    stiffness: DenseMatrix,
    operator: DenseMatrix,
    kernel: RelaxationKernel,
    lags: Vec<DenseMatrix>,
    kernel_sup_norm: f64,
    compliance: ComplianceLaw,
    constraints: ConstraintSet,
    load: LoadHistory,
    grid: TimeGrid,
    options: ProblemOptions,
    m_b: f64,
}

impl HdviProblem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        space: DiscreteSpace,
        stiffness: DenseMatrix,
        kernel: RelaxationKernel,
        compliance: ComplianceLaw,
        constraints: ConstraintSet,
        load: LoadHistory,
        grid: TimeGrid,
        options: ProblemOptions,
    ) -> Result<Self, ModelError> {
        let nq = space.n_strain();
        let n = space.n_dof();
        if stiffness.nrows() != nq || stiffness.ncols() != nq {
            return Err(mismatch("stiffness", nq, stiffness.nrows().max(stiffness.ncols())));
        }
        if !all_finite(&stiffness) {
            return Err(ModelError::NonFinite("stiffness".into()));
        }
        if kernel.dim() != nq {
            return Err(mismatch("kernel", nq, kernel.dim()));
        }
        if constraints.n_dof() != n {
            return Err(mismatch("constraints", n, constraints.n_dof()));
        }
        if let Some(c) = compliance.contacts().iter().find(|c| c.dof >= n) {
            return Err(ModelError::DofOutOfRange { dof: c.dof, n_dof: n });
        }
        if load.dim() != n {
            return Err(mismatch("load", n, load.dim()));
        }
        if *load.grid() != grid {
            return Err(ModelError::InvalidLoad("load is sampled on a different grid".into()));
        }
        if !(options.safety_factor.is_finite() && options.safety_factor >= 1.0) {
            return Err(ModelError::InvalidKernel(format!(
                "safety factor must be ≥ 1, got {}",
                options.safety_factor
            )));
        }
        let operator = space.assemble(&stiffness);
        let m_b = coercivity(&operator, &space)?;
        if !(m_b > 0.0) {
            return Err(ModelError::NotCoercive(m_b));
        }
        let lags: Vec<DenseMatrix> = (0..=grid.steps()).map(|k| kernel.evaluate(grid.node(k))).collect();
        let norms: Vec<f64> = lags.iter().map(|m| space.q_operator_norm(m)).collect();
        if let Some(modulus) = kernel.modulus() {
            for k in 1..lags.len() {
                let jump = space.q_operator_norm(&(&lags[k] - &lags[k - 1]));
                if jump > modulus {
                    return Err(ModelError::KernelModulusExceeded { t: grid.node(k), jump, modulus });
                }
            }
        }
        let kernel_sup_norm = norms.iter().copied().fold(0.0, f64::max) * options.safety_factor;
        Ok(Self {
            space,
            stiffness,
            operator,
            kernel,
            lags,
            kernel_sup_norm,
            compliance,
            constraints,
            load,
            grid,
            options,
            m_b,
        })
    }

    pub fn space(&self) -> &DiscreteSpace {
        &self.space
    }

    pub fn n_dof(&self) -> usize {
        self.space.n_dof()
    }

    pub fn stiffness(&self) -> &DenseMatrix {
        &self.stiffness
    }

    /// `W = Dᵀ diag(w) B D`.
    pub fn operator(&self) -> &DenseMatrix {
        &self.operator
    }

    pub fn kernel(&self) -> &RelaxationKernel {
        &self.kernel
    }

    /// `R(k·Δt)` for `k = 0..=M`.
    pub fn lags(&self) -> &[DenseMatrix] {
        &self.lags
    }

    pub fn kernel_sup_norm(&self) -> f64 {
        self.kernel_sup_norm
    }

    pub fn compliance(&self) -> &ComplianceLaw {
        &self.compliance
    }

    pub fn constraints(&self) -> &ConstraintSet {
        &self.constraints
    }

    pub fn load(&self) -> &LoadHistory {
        &self.load
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn quadrature(&self) -> Quadrature {
        self.options.quadrature
    }

    pub fn options(&self) -> ProblemOptions {
        self.options
    }

    pub fn m_b(&self) -> f64 {
        self.m_b
    }

    /// The same problem driven by another load on the same grid.
    pub fn with_load(&self, load: LoadHistory) -> Result<Self, ModelError> {
        if load.dim() != self.n_dof() {
            return Err(mismatch("load", self.n_dof(), load.dim()));
        }
        if *load.grid() != self.grid {
            return Err(ModelError::InvalidLoad("load is sampled on a different grid".into()));
        }
        let mut out = self.clone();
        out.load = load;
        Ok(out)
    }

    pub fn with_quadrature(&self, quadrature: Quadrature) -> Self {
        let mut out = self.clone();
        out.options.quadrature = quadrature;
        out
    }

    /// `(W + P)(u)`.
    pub fn apply_operator(&self, u: &Vector) -> Vector {
        &self.operator * u + self.compliance.apply(u)
    }
}

/// Smallest `λ` with `sym(W) x = λ G x`, shifted by the trace ratio to limit cancellation.
fn coercivity(operator: &DenseMatrix, space: &DiscreteSpace) -> Result<f64, ModelError> {
    let g = space.metric();
    let shift = operator.trace() / g.trace();
    let shifted = operator - g * shift;
    Ok(shift + min_generalized_eigenvalue(&shifted, space.metric_factor())?)
}

/// `c`, `K` and `T*` of the contraction and Lipschitz estimates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DerivedConstants {
    pub m_b: f64,
    pub kernel_sup_norm: f64,
    pub c: f64,
    #[serde(rename = "K")]
    pub k: f64,
    #[serde(serialize_with = "finite_or_null")]
    pub t_star: f64,
    pub t_star_unbounded: bool,
}

fn finite_or_null<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
    if x.is_finite() {
        s.serialize_f64(*x)
    } else {
        s.serialize_none()
    }
}

pub fn derived_constants(p: &HdviProblem) -> DerivedConstants {
    constants_from(p.m_b(), p.kernel_sup_norm(), p.grid().t_end())
}

pub fn constants_from(m_b: f64, kernel_sup_norm: f64, t_end: f64) -> DerivedConstants {
    let c = kernel_sup_norm / m_b;
    let k = (c * t_end).exp() / m_b;
    let unbounded = kernel_sup_norm == 0.0;
    let t_star = if unbounded { f64::INFINITY } else { m_b / (2.0 * kernel_sup_norm) };
    DerivedConstants { m_b, kernel_sup_norm, c, k, t_star, t_star_unbounded: unbounded }
}

/// Index of the contact dof (the node at `x = 1`) of the rod example.
pub fn rod_contact_dof(n_elements: usize) -> usize {
    n_elements - 1
}

/// Strain map and weights of linear elements on a uniform mesh of (0,1), node 0 clamped.
pub fn rod_space(n_elements: usize) -> Result<DiscreteSpace, ModelError> {
    if n_elements == 0 {
        return Err(ModelError::EmptyMesh);
    }
    let h = 1.0 / n_elements as f64;
    let mut d = DenseMatrix::zeros(n_elements, n_elements);
    for e in 0..n_elements {
        d[(e, e)] = 1.0 / h;
        if e > 0 {
            d[(e, e - 1)] = -1.0 / h;
        }
    }
    DiscreteSpace::new(d, Vector::from_element(n_elements, h))
}

/// One-dimensional rod with `B = I`, `R ≡ 1`, no compliance, bound `u(1) ≤ 1` and
/// the load `⟨f, v⟩ = (1, v′)`, whose exact solution is `x·e^{-t}`.
pub fn build_rod_example(n_elements: usize, grid: TimeGrid) -> Result<HdviProblem, ModelError> {
    let space = rod_space(n_elements)?;
    let contact = rod_contact_dof(n_elements);
    let mut f = Vector::zeros(n_elements);
    f[contact] = 1.0;
    HdviProblem::new(
        space,
        DenseMatrix::identity(n_elements, n_elements),
        RelaxationKernel::constant(DenseMatrix::identity(n_elements, n_elements))?,
        ComplianceLaw::none(),
        ConstraintSet::new(n_elements, vec![(contact, 1.0)])?,
        LoadHistory::constant(grid, f),
        grid,
        ProblemOptions::default(),
    )
}

/// Nodal coordinates `x_i = i·h`, `i = 1..=N`, of the rod dofs.
pub fn rod_nodes(n_elements: usize) -> Vec<f64> {
    (1..=n_elements).map(|i| i as f64 / n_elements as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid() -> TimeGrid {
        TimeGrid::new(1.0, 10).unwrap()
    }

    #[test]
    fn rod_single_element() {
        let p = build_rod_example(1, grid()).unwrap();
        assert_eq!(p.n_dof(), 1);
        assert_eq!(p.constraints().bounded(), &[(0, 1.0)]);
        assert_eq!(p.load().at(0).as_slice(), &[1.0]);
    }

    #[test]
    fn rod_four_elements() {
        let p = build_rod_example(4, grid()).unwrap();
        assert_eq!(p.n_dof(), 4);
        assert_eq!(rod_contact_dof(4), 3);
        assert_eq!(p.constraints().bounded(), &[(3, 1.0)]);
        assert!((p.m_b() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn rod_unit_coercivity_for_all_sizes() {
        for n in 1..=64 {
            let p = build_rod_example(n, grid()).unwrap();
            assert!((p.m_b() - 1.0).abs() <= 1e-12, "n={n}: m_B={}", p.m_b());
        }
    }

    #[test]
    fn rod_load_reproduces_linear_profile_statically() {
        // W x = f for the nodal interpolant of u = x
        let p = build_rod_example(8, grid()).unwrap();
        let x = Vector::from_vec(rod_nodes(8));
        let r = p.operator() * &x - p.load().at(0);
        assert!(r.amax() < 1e-12);
    }

    #[test]
    fn constants_examples() {
        let rod = derived_constants(&build_rod_example(4, grid()).unwrap());
        assert!((rod.c - 1.0).abs() < 1e-12);
        assert!((rod.k - std::f64::consts::E).abs() < 1e-11);
        assert!((rod.t_star - 0.5).abs() < 1e-12);
        assert!(!rod.t_star_unbounded);

        let zero = constants_from(2.0, 0.0, 1.0);
        assert_eq!(zero.c, 0.0);
        assert_eq!(zero.k, 0.5);
        assert!(zero.t_star_unbounded && zero.t_star.is_infinite());

        let d = constants_from(2.0, 4.0, 0.5);
        assert_eq!(d.c, 2.0);
        assert!((d.k - 0.5 * std::f64::consts::E).abs() < 1e-15);
        assert_eq!(d.t_star, 0.25);
    }

    #[test]
    fn projection_examples() {
        let u = ConstraintSet::new(2, vec![(0, 1.0)]).unwrap();
        assert_eq!(u.project(&Vector::from_vec(vec![2.0, 5.0])).as_slice(), &[1.0, 5.0]);
        let v = Vector::from_vec(vec![0.5, 9.0]);
        assert_eq!(u.project(&v), v);
        let u = ConstraintSet::new(2, vec![(0, 0.0), (1, 0.0)]).unwrap();
        assert_eq!(u.project(&Vector::from_vec(vec![-1.0, 3.0])).as_slice(), &[-1.0, 0.0]);
    }

    #[test]
    fn constraint_set_validation() {
        assert!(matches!(ConstraintSet::new(2, vec![(2, 1.0)]), Err(ModelError::DofOutOfRange { .. })));
        assert!(matches!(ConstraintSet::new(2, vec![(1, 1.0), (1, 2.0)]), Err(ModelError::DuplicateDof(1))));
        assert!(!ConstraintSet::new(2, vec![(1, -1.0)]).unwrap().zero_feasible());
    }

    #[test]
    fn linear_compliance_derivative() {
        let p = ComplianceFunction::Linear { stiffness: 3.0 };
        assert_eq!(p.directional_derivative(1.0, -2.0), -6.0);
        assert_eq!(p.directional_derivative(0.0, -2.0), 0.0);
        assert_eq!(p.directional_derivative(0.0, 2.0), 6.0);
        assert_eq!(p.directional_derivative(-1.0, 2.0), 0.0);
    }

    #[test]
    fn piecewise_compliance_values_and_kinks() {
        let p = ComplianceFunction::PiecewiseLinear { breakpoints: vec![1.0], slopes: vec![1.0, 4.0] };
        assert_eq!(p.value(0.5), 0.5);
        assert_eq!(p.value(2.0), 5.0);
        assert_eq!(p.directional_derivative(1.0, 1.0), 4.0);
        assert_eq!(p.directional_derivative(1.0, -1.0), -1.0);
        assert_eq!(p.lipschitz(), 4.0);
        assert!(!p.is_smooth_at(1.0));
        assert!(p.is_smooth_at(0.5));
    }

    #[test]
    fn kernel_table_interpolates() {
        let k = RelaxationKernel::new(
            KernelKind::Table {
                times: vec![0.0, 1.0],
                matrices: vec![DenseMatrix::from_element(1, 1, 2.0), DenseMatrix::from_element(1, 1, 4.0)],
            },
            None,
        )
        .unwrap();
        assert_eq!(k.evaluate(0.25)[(0, 0)], 2.5);
        assert_eq!(k.evaluate(5.0)[(0, 0)], 4.0);
    }

    #[test]
    fn kernel_rejects_non_square_and_modulus_jumps() {
        let err = RelaxationKernel::constant(DenseMatrix::zeros(2, 3)).unwrap_err();
        assert!(matches!(err, ModelError::InvalidKernel(_)));
        let kernel = RelaxationKernel::new(
            KernelKind::Exponential { matrix: DenseMatrix::identity(4, 4), rate: 50.0 },
            Some(1e-3),
        )
        .unwrap();
        let rod = build_rod_example(4, grid()).unwrap();
        let err = HdviProblem::new(
            rod.space().clone(),
            rod.stiffness().clone(),
            kernel,
            ComplianceLaw::none(),
            rod.constraints().clone(),
            rod.load().clone(),
            grid(),
            ProblemOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, ModelError::KernelModulusExceeded { .. }));
    }

    #[test]
    fn kernel_norm_is_q_weighted() {
        // diag(√w) R diag(1/√w) with w = (1, 4): [[0, 1],[0, 0]] scales to [[0, 1/2],[0, 0]]
        let space = DiscreteSpace::new(DenseMatrix::identity(2, 2), Vector::from_vec(vec![1.0, 4.0])).unwrap();
        let r = DenseMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        assert!((space.q_operator_norm(&r) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn load_interpolation_and_table() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        let load = LoadHistory::from_table(
            g,
            &[0.0, 1.0],
            &[Vector::from_vec(vec![0.0]), Vector::from_vec(vec![4.0])],
        )
        .unwrap();
        assert_eq!(load.at(1)[0], 1.0);
        assert_eq!(load.at_time(0.375)[0], 1.5);
        assert_eq!(load.at_time(1.0)[0], 4.0);
    }

    #[test]
    fn non_coercive_operator_is_rejected() {
        let rod = build_rod_example(2, grid()).unwrap();
        let err = HdviProblem::new(
            rod.space().clone(),
            DenseMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]),
            RelaxationKernel::zero(2),
            ComplianceLaw::none(),
            rod.constraints().clone(),
            rod.load().clone(),
            grid(),
            ProblemOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, ModelError::NotCoercive(_)));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn projection_idempotent_and_nonexpansive(
            a in proptest::collection::vec(-5.0f64..5.0, 4),
            b in proptest::collection::vec(-5.0f64..5.0, 4),
            g in proptest::collection::vec(-2.0f64..2.0, 2),
        ) {
            let set = ConstraintSet::new(4, vec![(0, g[0]), (2, g[1])]).unwrap();
            let (a, b) = (Vector::from_vec(a), Vector::from_vec(b));
            let pa = set.project(&a);
            prop_assert_eq!(set.project(&pa), pa.clone());
            prop_assert!((pa - set.project(&b)).norm() <= (a - b).norm() + 1e-15);
        }

        #[test]
        fn default_compliance_is_monotone_and_vanishes(
            pairs in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 10_000 / 64 + 1),
            c in 0.0f64..100.0,
        ) {
            let p = ComplianceFunction::Linear { stiffness: c };
            for (r1, r2) in pairs {
                let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
                prop_assert!(p.value(lo) <= p.value(hi));
                prop_assert!((p.value(r1) - p.value(r2)).abs() <= c * (r1 - r2).abs() + 1e-14 * c * (r1.abs() + r2.abs()));
                if lo <= 0.0 {
                    prop_assert_eq!(p.value(lo), 0.0);
                }
            }
        }
    }
}
