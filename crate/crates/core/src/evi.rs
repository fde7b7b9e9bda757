//! The elliptic inequality solved at each time node and its directional
//! derivative on the critical cone.
//!
//! Both are box-constrained monotone problems `A z + N(z) ∋ ω` where `N` acts
//! only on bounded and contact dofs (the interface). Free dofs are eliminated
//! by a Schur complement and the projected fixed-point iteration runs on the
//! interface alone; convergence is declared on the full-space natural residual
//! with step `ρ = m/L²`.

use nalgebra::SymmetricEigen;
use serde::Serialize;

use crate::algebra::{is_symmetric, min_symmetric_eigenvalue, operator_norm, DenseMatrix, Factorization, Vector};
use crate::error::SolverError;
use crate::model::HdviProblem;

pub const DEFAULT_MAX_ITERATIONS: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct EviResult {
    pub z: Vector,
    pub residual: f64,
    pub iterations: usize,
    /// `ζ = ω − (W + P)(z)`.
    pub multiplier: Vector,
}

/// Relative thresholds of the activity and multiplier tests.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct Thresholds {
    /// A bounded dof is active when `g − z ≤ act·(1 + |g|)`.
    pub act: f64,
    /// A multiplier is zero when `|ζ_i| ≤ mult·(1 + ‖ζ‖∞)`.
    pub mult: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { act: 1e-10, mult: 1e-8 }
    }
}

impl Thresholds {
    pub fn tau_act(&self, g: f64) -> f64 {
        self.act * (1.0 + g.abs())
    }

    pub fn tau_mult(&self, zeta: &Vector) -> f64 {
        self.mult * (1.0 + zeta.amax())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ConeTag {
    /// Inactive: the direction is unrestricted.
    Free,
    /// Active with vanishing multiplier: directions must not increase the dof.
    Nonpositive,
    /// Active with positive multiplier: the dof is pinned.
    Zero,
}

impl ConeTag {
    pub fn as_str(self) -> &'static str {
        match self {
            ConeTag::Free => "free",
            ConeTag::Nonpositive => "nonpositive",
            ConeTag::Zero => "zero",
        }
    }
}

/// Per-dof description of the critical cone; unbounded dofs are free.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticalCone {
    n_dof: usize,
    /// `(dof, tag)` for each bounded dof in increasing dof order.
    pub tags: Vec<(usize, ConeTag)>,
    /// Bounded dofs whose multiplier sits within the threshold (weak activity).
    pub ambiguous: Vec<usize>,
}

impl CriticalCone {
    pub fn all_free(p: &HdviProblem) -> Self {
        let tags = p.constraints().bounded().iter().map(|&(d, _)| (d, ConeTag::Free)).collect();
        Self { n_dof: p.n_dof(), tags, ambiguous: Vec::new() }
    }

    pub fn from_tags(n_dof: usize, tags: Vec<(usize, ConeTag)>) -> Self {
        Self { n_dof, tags, ambiguous: Vec::new() }
    }

    pub fn n_dof(&self) -> usize {
        self.n_dof
    }

    pub fn tag(&self, dof: usize) -> ConeTag {
        self.tags.iter().find(|(d, _)| *d == dof).map_or(ConeTag::Free, |(_, t)| *t)
    }

    pub fn is_all_free(&self) -> bool {
        self.tags.iter().all(|(_, t)| *t == ConeTag::Free)
    }

    pub fn has_nonpositive(&self) -> bool {
        self.tags.iter().any(|(_, t)| *t == ConeTag::Nonpositive)
    }

    /// Euclidean projection onto the cone.
    pub fn project(&self, v: &Vector) -> Vector {
        let mut out = v.clone();
        for &(dof, tag) in &self.tags {
            match tag {
                ConeTag::Free => {}
                ConeTag::Nonpositive => out[dof] = out[dof].min(0.0),
                ConeTag::Zero => out[dof] = 0.0,
            }
        }
        out
    }
}

/// Classifies the bounded dofs of a feasible `z` with multiplier `ζ`.
pub fn critical_cone(
    p: &HdviProblem,
    z: &Vector,
    zeta: &Vector,
    thresholds: &Thresholds,
) -> Result<CriticalCone, SolverError> {
    let tau_mult = thresholds.tau_mult(zeta);
    let mut tags = Vec::with_capacity(p.constraints().bounded().len());
    let mut ambiguous = Vec::new();
    for &(dof, g) in p.constraints().bounded() {
        let tag = if g - z[dof] > thresholds.tau_act(g) {
            ConeTag::Free
        } else if zeta[dof].abs() <= tau_mult {
            ambiguous.push(dof);
            ConeTag::Nonpositive
        } else if zeta[dof] > 0.0 {
            ConeTag::Zero
        } else {
            return Err(SolverError::InconsistentMultiplier { dof, multiplier: zeta[dof] });
        };
        tags.push((dof, tag));
    }
    Ok(CriticalCone { n_dof: p.n_dof(), tags, ambiguous })
}

/// `ρ = m/L²` with `m = λ_min(sym A)` and `L = ‖A‖₂ + l_nl`.
pub fn natural_step(a: &DenseMatrix, l_nl: f64) -> f64 {
    let m = min_symmetric_eigenvalue(a);
    let l = operator_norm(a) + l_nl;
    m / (l * l)
}

/// The step used by [`solve_evi`] and [`vi_residual`].
pub fn evi_step(p: &HdviProblem) -> f64 {
    natural_step(p.operator(), p.compliance().lipschitz() * p.compliance().max_weight())
}

/// `‖z − Π_U(z − ρ((W + P)z − ω))‖₂ / ρ`.
pub fn vi_residual(p: &HdviProblem, z: &Vector, omega: &Vector) -> f64 {
    residual_with_step(p, evi_step(p), z, omega)
}

fn residual_with_step(p: &HdviProblem, rho: f64, z: &Vector, omega: &Vector) -> f64 {
    let r = p.apply_operator(z) - omega;
    let trial = p.constraints().project(&(z - &r * rho));
    (z - trial).norm() / rho
}

/// Per-interface-dof box `lower ≤ z ≤ upper`.
pub(crate) type Bounds = (Option<f64>, Option<f64>);

fn clamp(v: f64, (lo, hi): Bounds) -> f64 {
    let v = match hi {
        Some(h) if v > h => h,
        _ => v,
    };
    match lo {
        Some(l) if v < l => l,
        _ => v,
    }
}

/// Schur reduction of `A` onto an interface index set.
#[derive(Debug, Clone)]
pub(crate) struct ReducedSystem {
    n: usize,
    interface: Vec<usize>,
    free: Vec<usize>,
    ff: Option<Factorization>,
    /// `A_FF⁻¹ A_FI`.
    coupling: DenseMatrix,
    /// `A_IF`.
    a_if: DenseMatrix,
    schur: DenseMatrix,
    schur_symmetric: bool,
    schur_min: f64,
    schur_norm: f64,
    rho_full: f64,
}

/// Right-hand side reduced onto the interface.
#[derive(Debug, Clone)]
pub(crate) struct ReducedRhs {
    /// `A_FF⁻¹ ω_F`.
    y: Vector,
    /// `ω_I − A_IF A_FF⁻¹ ω_F`.
    reduced: Vector,
}

pub(crate) struct ReducedSolution {
    pub z: Vector,
    pub iterations: usize,
}

impl ReducedSystem {
    /// `rho_full` is the full-space step used in the stopping rule.
    pub fn new(a: &DenseMatrix, interface: Vec<usize>, rho_full: f64) -> Result<Self, SolverError> {
        let n = a.nrows();
        let mut is_interface = vec![false; n];
        for &i in &interface {
            is_interface[i] = true;
        }
        let free: Vec<usize> = (0..n).filter(|&i| !is_interface[i]).collect();
        let k = interface.len();
        let a_ff = a.select_rows(&free).select_columns(&free);
        let a_fi = a.select_rows(&free).select_columns(&interface);
        let a_if = a.select_rows(&interface).select_columns(&free);
        let a_ii = a.select_rows(&interface).select_columns(&interface);
        let (ff, coupling) = if free.is_empty() {
            (None, DenseMatrix::zeros(0, k))
        } else {
            let f = Factorization::new(&a_ff)?;
            let c = f.solve_matrix(&a_fi)?;
            (Some(f), c)
        };
        let schur = &a_ii - &a_if * &coupling;
        let schur_symmetric = is_symmetric(&schur, 1e-12);
        let (schur_min, schur_norm) = if k == 0 {
            (f64::INFINITY, 0.0)
        } else if schur_symmetric {
            let sym = (&schur + schur.transpose()) * 0.5;
            let eig = SymmetricEigen::new(sym).eigenvalues;
            (eig.min(), eig.max())
        } else {
            (min_symmetric_eigenvalue(&schur), operator_norm(&schur))
        };
        if !(schur_min > 0.0) {
            return Err(SolverError::InvalidArgument(format!(
                "reduced operator is not coercive (λ_min = {schur_min:e})"
            )));
        }
        Ok(Self {
            n,
            interface,
            free,
            ff,
            coupling,
            a_if,
            schur,
            schur_symmetric,
            schur_min,
            schur_norm,
            rho_full,
        })
    }

    pub fn interface(&self) -> &[usize] {
        &self.interface
    }

    pub fn reduce(&self, omega: &Vector) -> Result<ReducedRhs, SolverError> {
        if omega.len() != self.n {
            return Err(SolverError::DimensionMismatch { what: "right-hand side", expected: self.n, found: omega.len() });
        }
        let omega_i = Vector::from_iterator(self.interface.len(), self.interface.iter().map(|&i| omega[i]));
        let y = match &self.ff {
            Some(f) => f.solve(&Vector::from_iterator(self.free.len(), self.free.iter().map(|&i| omega[i])))?,
            None => Vector::zeros(0),
        };
        let reduced = omega_i - &self.a_if * &y;
        Ok(ReducedRhs { y, reduced })
    }

    /// Full vector from interface values: `z_F = y − C z_I`.
    pub fn expand(&self, rhs: &ReducedRhs, z_i: &Vector) -> Vector {
        let z_f = &rhs.y - &self.coupling * z_i;
        let mut z = Vector::zeros(self.n);
        for (k, &i) in self.free.iter().enumerate() {
            z[i] = z_f[k];
        }
        for (k, &i) in self.interface.iter().enumerate() {
            z[i] = z_i[k];
        }
        z
    }

    /// Projected fixed-point iteration on the interface.
    ///
    /// `nl(k, v)` is the monotone diagonal nonlinearity of interface slot `k`
    /// with Lipschitz constant at most `l_nl`.
    #[allow(clippy::too_many_arguments)]
    pub fn solve(
        &self,
        rhs: &ReducedRhs,
        bounds: &[Bounds],
        nl: &dyn Fn(usize, f64) -> f64,
        l_nl: f64,
        z0_i: &Vector,
        tol: f64,
        max_iterations: usize,
    ) -> Result<ReducedSolution, SolverError> {
        let k = self.interface.len();
        if k == 0 {
            return Ok(ReducedSolution { z: self.expand(rhs, &Vector::zeros(0)), iterations: 0 });
        }
        let l = self.schur_norm + l_nl;
        let rho = if self.schur_symmetric {
            2.0 / (self.schur_min + l)
        } else {
            self.schur_min / (l * l)
        };
        let mut z = Vector::from_iterator(k, (0..k).map(|j| clamp(z0_i[j], bounds[j])));
        let scale = rhs.reduced.amax();
        for it in 0..max_iterations {
            let mut r = &self.schur * &z - &rhs.reduced;
            for j in 0..k {
                r[j] += nl(j, z[j]);
            }
            let residual = self.natural_residual(&z, &r, bounds);
            if residual <= tol {
                return Ok(ReducedSolution { z: self.expand(rhs, &z), iterations: it });
            }
            let next = Vector::from_iterator(k, (0..k).map(|j| clamp(z[j] - rho * r[j], bounds[j])));
            if next.iter().any(|v| !v.is_finite()) {
                return Err(SolverError::NonFiniteIterate { iteration: it + 1 });
            }
            if next == z {
                // Exact stagnation: accept only a round-off sized residual.
                let floor = 1e3 * f64::EPSILON * (l * z.amax() + scale) * (k as f64).sqrt();
                if residual <= floor {
                    return Ok(ReducedSolution { z: self.expand(rhs, &z), iterations: it });
                }
                return Err(SolverError::MaxIterations { iterations: it, residual });
            }
            z = next;
        }
        let mut r = &self.schur * &z - &rhs.reduced;
        for j in 0..k {
            r[j] += nl(j, z[j]);
        }
        Err(SolverError::MaxIterations { iterations: max_iterations, residual: self.natural_residual(&z, &r, bounds) })
    }

    fn natural_residual(&self, z: &Vector, r: &Vector, bounds: &[Bounds]) -> f64 {
        let rho = self.rho_full;
        let mut acc = 0.0;
        for j in 0..z.len() {
            let d = z[j] - clamp(z[j] - rho * r[j], bounds[j]);
            acc += d * d;
        }
        acc.sqrt() / rho
    }
}

/// Prepared solver for the nodal inequality of one problem.
#[derive(Debug, Clone)]
pub struct EviSolver<'a> {
    problem: &'a HdviProblem,
    system: ReducedSystem,
    /// Upper bound per interface slot.
    upper: Vec<Option<f64>>,
    /// Compliance weight per interface slot.
    weights: Vec<Option<f64>>,
    l_nl: f64,
    rho: f64,
    pub max_iterations: usize,
}

impl<'a> EviSolver<'a> {
    pub fn new(problem: &'a HdviProblem) -> Result<Self, SolverError> {
        let n = problem.n_dof();
        let mut weight_of = vec![None; n];
        for c in problem.compliance().contacts() {
            weight_of[c.dof] = Some(c.weight);
        }
        let interface: Vec<usize> =
            (0..n).filter(|&i| problem.constraints().upper(i).is_some() || weight_of[i].is_some()).collect();
        let upper = interface.iter().map(|&i| problem.constraints().upper(i)).collect();
        let weights = interface.iter().map(|&i| weight_of[i]).collect();
        let rho = evi_step(problem);
        let system = ReducedSystem::new(problem.operator(), interface, rho)?;
        let l_nl = problem.compliance().lipschitz() * problem.compliance().max_weight();
        Ok(Self { problem, system, upper, weights, l_nl, rho, max_iterations: DEFAULT_MAX_ITERATIONS })
    }

    pub fn problem(&self) -> &'a HdviProblem {
        self.problem
    }

    /// [`vi_residual`] with the step computed once.
    pub fn residual(&self, z: &Vector, omega: &Vector) -> f64 {
        residual_with_step(self.problem, self.rho, z, omega)
    }

    fn interface_values(&self, v: &Vector) -> Vector {
        Vector::from_iterator(self.system.interface().len(), self.system.interface().iter().map(|&i| v[i]))
    }

    /// Solves `z ∈ U`, `⟨(W + P)z − ω, v − z⟩ ≥ 0` for all `v ∈ U`.
    pub fn solve(&self, omega: &Vector, z0: &Vector, tol: f64) -> Result<EviResult, SolverError> {
        check_inputs(self.problem.n_dof(), omega, z0, tol)?;
        let rhs = self.system.reduce(omega)?;
        let bounds: Vec<Bounds> = self.upper.iter().map(|&u| (None, u)).collect();
        let law = self.problem.compliance().function();
        let nl = |j: usize, v: f64| self.weights[j].map_or(0.0, |w| w * law.value(v));
        let sol = self.system.solve(
            &rhs,
            &bounds,
            &nl,
            self.l_nl,
            &self.interface_values(z0),
            tol,
            self.max_iterations,
        )?;
        // the clamp above is exact, so the expanded vector is feasible
        let multiplier = omega - self.problem.apply_operator(&sol.z);
        let residual = self.residual(&sol.z, omega);
        Ok(EviResult { z: sol.z, residual, iterations: sol.iterations, multiplier })
    }

    /// Solves the derivative inequality on `cone` at the base point `z`.
    pub fn solve_derivative(
        &self,
        cone: &CriticalCone,
        z: &Vector,
        delta_omega: &Vector,
        tol: f64,
    ) -> Result<Vector, SolverError> {
        check_inputs(self.problem.n_dof(), delta_omega, z, tol)?;
        if cone.n_dof() != self.problem.n_dof() {
            return Err(SolverError::DimensionMismatch {
                what: "critical cone",
                expected: self.problem.n_dof(),
                found: cone.n_dof(),
            });
        }
        let rhs = self.system.reduce(delta_omega)?;
        let bounds: Vec<Bounds> = self
            .system
            .interface()
            .iter()
            .map(|&i| match cone.tag(i) {
                ConeTag::Free => (None, None),
                ConeTag::Nonpositive => (None, Some(0.0)),
                ConeTag::Zero => (Some(0.0), Some(0.0)),
            })
            .collect();
        let law = self.problem.compliance().function();
        let base = self.interface_values(z);
        let nl = |j: usize, v: f64| self.weights[j].map_or(0.0, |w| w * law.directional_derivative(base[j], v));
        let start = Vector::zeros(self.system.interface().len());
        let sol = self.system.solve(&rhs, &bounds, &nl, self.l_nl, &start, tol, self.max_iterations)?;
        Ok(cone.project(&sol.z))
    }

    /// Residual of the derivative inequality at `δz` (zero iff it solves it).
    pub fn derivative_residual(&self, cone: &CriticalCone, z: &Vector, dz: &Vector, delta_omega: &Vector) -> f64 {
        let rho = self.rho;
        let r = self.problem.operator() * dz + self.problem.compliance().directional_derivative(z, dz) - delta_omega;
        let trial = cone.project(&(dz - &r * rho));
        (dz - trial).norm() / rho
    }
}

fn check_inputs(n: usize, omega: &Vector, z0: &Vector, tol: f64) -> Result<(), SolverError> {
    if omega.len() != n {
        return Err(SolverError::DimensionMismatch { what: "right-hand side", expected: n, found: omega.len() });
    }
    if z0.len() != n {
        return Err(SolverError::DimensionMismatch { what: "starting vector", expected: n, found: z0.len() });
    }
    if omega.iter().any(|v| !v.is_finite()) {
        return Err(SolverError::InvalidArgument("right-hand side is not finite".into()));
    }
    if !(tol > 0.0) {
        return Err(SolverError::InvalidArgument(format!("tolerance must be positive, got {tol}")));
    }
    Ok(())
}

/// One-shot form of [`EviSolver::solve`].
pub fn solve_evi(p: &HdviProblem, omega: &Vector, z0: &Vector, tol: f64) -> Result<EviResult, SolverError> {
    EviSolver::new(p)?.solve(omega, z0, tol)
}

/// One-shot form of [`EviSolver::solve_derivative`].
pub fn solve_evi_derivative(
    p: &HdviProblem,
    cone: &CriticalCone,
    z: &Vector,
    delta_omega: &Vector,
    tol: f64,
) -> Result<Vector, SolverError> {
    EviSolver::new(p)?.solve_derivative(cone, z, delta_omega, tol)
}
