//! Residuals of approximating sequences and the stability bound relating them
//! to the distance from the solution.
//!
//! A *p*-sequence satisfies the nodal inequality up to a slack `ε‖v − u‖_V`;
//! a *q*-sequence satisfies the fixed-point equation `u = Λu` up to `ε`.

use nalgebra::SymmetricEigen;
use rayon::prelude::*;
use serde::Serialize;

use crate::algebra::Vector;
use crate::error::SolverError;
use crate::evi::{EviSolver, ReducedSystem, Thresholds};
use crate::hdvi::{apply_lambda_with, solve_forward_with, Memory, Trajectory};
use crate::model::{derived_constants, rod_nodes, HdviProblem, LoadHistory};

const PROJECTION_MAX_ITERATIONS: usize = 1_000_000;

/// Outcome of the p-residual: a value only for feasible trajectories.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum PResidual {
    Infeasible { node: usize, dof: usize, excess: f64 },
    Feasible { max: f64, per_node: Vec<f64> },
}

impl PResidual {
    pub fn value(&self) -> Option<f64> {
        match self {
            PResidual::Infeasible { .. } => None,
            PResidual::Feasible { max, .. } => Some(*max),
        }
    }

    pub fn is_feasible(&self) -> bool {
        matches!(self, PResidual::Feasible { .. })
    }
}

/// `max_n ‖u_n − (Λu)_n‖_G`.
pub fn q_residual(p: &HdviProblem, u: &Trajectory, tol: f64) -> Result<f64, SolverError> {
    q_residual_with(&EviSolver::new(p)?, u, tol)
}

fn q_residual_with(solver: &EviSolver<'_>, u: &Trajectory, tol: f64) -> Result<f64, SolverError> {
    let p = solver.problem();
    let lam = apply_lambda_with(solver, p.load(), u, tol)?;
    Ok(u.values.iter().zip(&lam.values).map(|(a, b)| p.space().v_norm(&(a - b))).fold(0.0, f64::max))
}

/// Smallest `ε` per node for which `u` satisfies the inequality with slack `ε‖v − u_n‖_V`.
///
/// Equals `‖Π_T r‖_G`, with `r` the Riesz representative of
/// `f_n − (W + P)u_n − ε*(memory)` and `T` the tangent cone of `U` at `u_n`,
/// the projection taken in the `G` metric.
pub fn p_residual(p: &HdviProblem, u: &Trajectory) -> Result<PResidual, SolverError> {
    p_residual_with(p, u, &Thresholds::default())
}

pub fn p_residual_with(p: &HdviProblem, u: &Trajectory, thresholds: &Thresholds) -> Result<PResidual, SolverError> {
    if u.grid != *p.grid() || u.len() != p.grid().len() {
        return Err(SolverError::DimensionMismatch { what: "trajectory nodes", expected: p.grid().len(), found: u.len() });
    }
    for (n, v) in u.values.iter().enumerate() {
        if v.len() != p.n_dof() {
            return Err(SolverError::DimensionMismatch { what: "trajectory", expected: p.n_dof(), found: v.len() });
        }
        for &(dof, g) in p.constraints().bounded() {
            let excess = v[dof] - g;
            if excess > thresholds.tau_act(g) {
                return Ok(PResidual::Infeasible { node: n, dof, excess });
            }
        }
    }
    let metric = p.space().metric();
    let eig = SymmetricEigen::new(metric.clone()).eigenvalues;
    let (m, l) = (eig.min(), eig.max());
    let rho = m / (l * l);
    let memory = Memory::new(p);
    let strains = memory.strains(&u.values);
    let per_node = (0..u.len())
        .into_par_iter()
        .map(|n| {
            let un = &u.values[n];
            let omega = p.load().at(n) - memory.dual(&memory.full(&strains, n)) - p.apply_operator(un);
            let active: Vec<usize> = p
                .constraints()
                .bounded()
                .iter()
                .filter(|&&(dof, g)| g - un[dof] <= thresholds.tau_act(g))
                .map(|&(dof, _)| dof)
                .collect();
            // min ½‖d‖²_G − ⟨ω, d⟩ over the cone: the G-projection of G⁻¹ω
            let system = ReducedSystem::new(metric, active.clone(), rho)?;
            let rhs = system.reduce(&omega)?;
            let bounds = vec![(None, Some(0.0)); active.len()];
            let tol = 1e-13 * (1.0 + omega.amax());
            let d = system
                .solve(&rhs, &bounds, &|_, _| 0.0, 0.0, &Vector::zeros(active.len()), tol, PROJECTION_MAX_ITERATIONS)?
                .z;
            Ok(p.space().v_norm(&d))
        })
        .collect::<Result<Vec<f64>, SolverError>>()?;
    let max = per_node.iter().copied().fold(0.0, f64::max);
    Ok(PResidual::Feasible { max, per_node })
}

/// Growth factor `Γ` of the discrete Gronwall recursion
/// `e_n = 1 + Δt·c·Σ_k w_{n,k} e_k` on the problem's quadrature, `Γ = max_n e_n`.
pub fn discrete_gronwall_factor(p: &HdviProblem) -> f64 {
    let c = derived_constants(p).c;
    let grid = p.grid();
    let rule = p.quadrature();
    let dt = grid.dt();
    let mut e: Vec<f64> = Vec::with_capacity(grid.len());
    for n in 0..grid.len() {
        let history: f64 = (0..n).map(|k| rule.weight(k, n) * e[k]).sum();
        let denom = 1.0 - dt * c * rule.self_weight(n);
        e.push((1.0 + dt * c * history) / denom);
    }
    e.into_iter().fold(1.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemberDiagnostic {
    pub feasible: bool,
    pub p_residual: Option<f64>,
    pub p_residual_per_node: Option<Vec<f64>>,
    pub q_residual: f64,
    pub v_distance_to_solution: f64,
    /// `(p_residual/m_B)·e^{cT} + slack`, for feasible members.
    pub p_bound: Option<f64>,
    /// `q_residual·Γ + slack`.
    pub q_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SequenceDiagnostic {
    pub members: Vec<MemberDiagnostic>,
    /// `(1/m_B)·e^{cT}`, identical to `DerivedConstants::k`.
    pub bound: f64,
    pub gronwall_factor: f64,
    pub slack: f64,
}

impl SequenceDiagnostic {
    pub fn any_feasible(&self) -> bool {
        self.members.iter().any(|m| m.feasible)
    }

    pub fn all_infeasible(&self) -> bool {
        self.members.iter().all(|m| !m.feasible)
    }

    /// True when the q-residuals and distances of the last members both decrease.
    pub fn q_tail_decreasing(&self, tail: usize) -> bool {
        let start = self.members.len().saturating_sub(tail);
        self.members[start..].windows(2).all(|w| {
            w[1].q_residual <= w[0].q_residual && w[1].v_distance_to_solution <= w[0].v_distance_to_solution
        })
    }
}

/// Residuals and distances of every member, checked against both stability bounds.
///
/// The q-bound uses the discrete Gronwall factor of the marching scheme, the
/// p-bound the continuous constant `K`. `slack = max(1e-8, 10·tol)`.
pub fn verify_t4_bound(p: &HdviProblem, members: &[Trajectory], tol: f64) -> Result<SequenceDiagnostic, SolverError> {
    verify_t4_bound_with(p, members, tol, &Thresholds::default())
}

pub fn verify_t4_bound_with(
    p: &HdviProblem,
    members: &[Trajectory],
    tol: f64,
    thresholds: &Thresholds,
) -> Result<SequenceDiagnostic, SolverError> {
    let solver = EviSolver::new(p)?;
    let solution = solve_forward_with(&solver, p.load(), tol)?;
    let constants = derived_constants(p);
    let gamma = discrete_gronwall_factor(p);
    let slack = (10.0 * tol).max(1e-8);
    let diagnostics = members
        .par_iter()
        .map(|u| {
            let pr = p_residual_with(p, u, thresholds)?;
            let q = q_residual_with(&solver, u, tol)?;
            let distance = u.c_distance(&solution, p.space());
            let (feasible, p_value, per_node) = match pr {
                PResidual::Infeasible { .. } => (false, None, None),
                PResidual::Feasible { max, per_node } => (true, Some(max), Some(per_node)),
            };
            Ok(MemberDiagnostic {
                feasible,
                p_residual: p_value,
                p_residual_per_node: per_node,
                q_residual: q,
                v_distance_to_solution: distance,
                p_bound: p_value.map(|e| e * constants.k + slack),
                q_bound: q * gamma + slack,
            })
        })
        .collect::<Result<Vec<_>, SolverError>>()?;
    for (member, d) in diagnostics.iter().enumerate() {
        if let Some(bound) = d.p_bound {
            if d.v_distance_to_solution > bound {
                return Err(SolverError::BoundViolated { member, kind: "p", distance: d.v_distance_to_solution, bound });
            }
        }
        if d.v_distance_to_solution > d.q_bound {
            return Err(SolverError::BoundViolated {
                member,
                kind: "q",
                distance: d.v_distance_to_solution,
                bound: d.q_bound,
            });
        }
    }
    Ok(SequenceDiagnostic { members: diagnostics, bound: constants.k, gronwall_factor: gamma, slack })
}

/// Solutions for the loads `f + ε_k·ω̂`, with `ω̂` the direction scaled to unit dual norm.
///
/// Each member satisfies the original inequality with slack at most `ε_k`.
pub fn p_approximating_sequence(
    p: &HdviProblem,
    direction: &Vector,
    epsilons: &[f64],
    tol: f64,
) -> Result<Vec<Trajectory>, SolverError> {
    if direction.len() != p.n_dof() {
        return Err(SolverError::DimensionMismatch { what: "direction", expected: p.n_dof(), found: direction.len() });
    }
    let norm = p.space().dual_norm(direction)?;
    if norm == 0.0 {
        return Err(SolverError::DegenerateDenominator);
    }
    let unit = direction / norm;
    epsilons
        .par_iter()
        .map(|&eps| {
            let extra = LoadHistory::constant(*p.grid(), &unit * eps);
            let perturbed = p.with_load(p.load().axpy(1.0, &extra))?;
            solve_forward_with(&EviSolver::new(&perturbed)?, perturbed.load(), tol)
        })
        .collect()
}

/// Rod trajectories `x·e^{-t} + 1/k` at the mesh nodes; infeasible at the contact for `t = 0`.
pub fn ex6_sequence(p: &HdviProblem, n_elements: usize, ks: &[usize]) -> Result<Vec<Trajectory>, SolverError> {
    let x = rod_nodes(n_elements);
    if x.len() != p.n_dof() {
        return Err(SolverError::DimensionMismatch { what: "rod nodes", expected: p.n_dof(), found: x.len() });
    }
    Ok(ks
        .iter()
        .map(|&k| {
            let shift = 1.0 / k as f64;
            Trajectory::from_fn(*p.grid(), |t| Vector::from_iterator(x.len(), x.iter().map(|xi| xi * (-t).exp() + shift)))
        })
        .collect())
}
