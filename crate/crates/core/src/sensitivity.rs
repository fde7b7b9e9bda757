//! Directional derivative of the load-to-solution map along a trajectory and
//! its validation by difference quotients.

use rayon::prelude::*;

use crate::algebra::{TimeGrid, Vector};
use crate::error::SolverError;
use crate::evi::{critical_cone, CriticalCone, EviSolver, Thresholds};
use crate::hdvi::{check_step_contraction, solve_forward_with, Memory, Trajectory, INNER_TOL_FACTOR, MAX_INNER_ITERATIONS};
use crate::model::{DiscreteSpace, HdviProblem, LoadHistory};

/// Derivative values at the nodes together with the frozen cones.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeTrajectory {
    pub grid: TimeGrid,
    pub values: Vec<Vector>,
    pub cones: Vec<CriticalCone>,
    /// Residual of the nodal cone inequality.
    pub residuals: Vec<f64>,
}

impl DerivativeTrajectory {
    /// Bounded dofs whose tag was decided inside the multiplier threshold, per node.
    pub fn ambiguous_nodes(&self) -> Vec<(usize, Vec<usize>)> {
        self.cones
            .iter()
            .enumerate()
            .filter(|(_, c)| !c.ambiguous.is_empty())
            .map(|(n, c)| (n, c.ambiguous.clone()))
            .collect()
    }
}

/// Cones of a base trajectory, reusable for many directions.
#[derive(Debug, Clone)]
pub struct DerivativeSolver<'a> {
    solver: EviSolver<'a>,
    base: Trajectory,
    cones: Vec<CriticalCone>,
}

impl<'a> DerivativeSolver<'a> {
    pub fn new(p: &'a HdviProblem, base: &Trajectory, thresholds: &Thresholds) -> Result<Self, SolverError> {
        Self::with_load(p, p.load(), base, thresholds)
    }

    /// Cones for a base trajectory driven by `load`.
    pub fn with_load(
        p: &'a HdviProblem,
        load: &LoadHistory,
        base: &Trajectory,
        thresholds: &Thresholds,
    ) -> Result<Self, SolverError> {
        if base.len() != p.grid().len() || base.grid != *p.grid() {
            return Err(SolverError::DimensionMismatch { what: "base trajectory", expected: p.grid().len(), found: base.len() });
        }
        check_step_contraction(p)?;
        let memory = Memory::new(p);
        let strains = memory.strains(&base.values);
        let cones = (0..base.len())
            .map(|n| {
                let zeta =
                    load.at(n) - memory.dual(&memory.full(&strains, n)) - p.apply_operator(&base.values[n]);
                critical_cone(p, &base.values[n], &zeta, thresholds)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { solver: EviSolver::new(p)?, base: base.clone(), cones })
    }

    pub fn cones(&self) -> &[CriticalCone] {
        &self.cones
    }

    pub fn base(&self) -> &Trajectory {
        &self.base
    }

    /// True when the derivative is linear in the direction: no weakly active
    /// bound and no compliance kink along the base trajectory.
    pub fn is_linear(&self) -> bool {
        let p = self.solver.problem();
        let law = p.compliance();
        self.cones.iter().all(|c| !c.has_nonpositive())
            && self
                .base
                .values
                .iter()
                .all(|u| law.contacts().iter().all(|c| c.weight == 0.0 || law.function().is_smooth_at(u[c.dof])))
    }

    pub fn solve(&self, delta_f: &LoadHistory, tol: f64) -> Result<DerivativeTrajectory, SolverError> {
        let p = self.solver.problem();
        if delta_f.dim() != p.n_dof() || delta_f.grid() != p.grid() {
            return Err(SolverError::DimensionMismatch { what: "load direction", expected: p.n_dof(), found: delta_f.dim() });
        }
        if !(tol > 0.0) {
            return Err(SolverError::InvalidArgument(format!("tolerance must be positive, got {tol}")));
        }
        let memory = Memory::new(p);
        let inner_tol = tol * INNER_TOL_FACTOR;
        let mut values: Vec<Vector> = Vec::with_capacity(p.grid().len());
        let mut strains: Vec<Vector> = Vec::with_capacity(p.grid().len());
        let mut residuals = Vec::with_capacity(p.grid().len());
        for n in 0..p.grid().len() {
            let cone = &self.cones[n];
            let z = &self.base.values[n];
            let base = delta_f.at(n) - memory.dual(&memory.history(&strains, n));
            let (du, rhs) = if memory.self_weight(n) == 0.0 {
                (self.solver.solve_derivative(cone, z, &base, inner_tol)?, base)
            } else {
                let mut du = values.last().cloned().unwrap_or_else(|| Vector::zeros(p.n_dof()));
                let mut converged = false;
                let mut change = f64::INFINITY;
                let mut inner = 0;
                while inner < MAX_INNER_ITERATIONS {
                    inner += 1;
                    let rhs = &base - memory.dual(&memory.self_term(&p.space().strain(&du), n));
                    let next = self.solver.solve_derivative(cone, z, &rhs, inner_tol)?;
                    change = p.space().v_norm(&(&next - &du));
                    du = next;
                    if change <= inner_tol {
                        converged = true;
                        break;
                    }
                }
                if !converged {
                    return Err(SolverError::MaxIterations { iterations: inner, residual: change });
                }
                let rhs = &base - memory.dual(&memory.self_term(&p.space().strain(&du), n));
                (du, rhs)
            };
            residuals.push(self.solver.derivative_residual(cone, z, &du, &rhs));
            strains.push(p.space().strain(&du));
            values.push(du);
        }
        Ok(DerivativeTrajectory { grid: *p.grid(), values, cones: self.cones.clone(), residuals })
    }
}

/// Derivative of the solution at `base` in the load direction `delta_f`.
pub fn solve_derivative(
    p: &HdviProblem,
    base: &Trajectory,
    delta_f: &LoadHistory,
    tol: f64,
) -> Result<DerivativeTrajectory, SolverError> {
    DerivativeSolver::new(p, base, &Thresholds::default())?.solve(delta_f, tol)
}

/// `(Σ_{n=1}^{M} Δt ‖a_n − b_n‖_G^ϱ)^{1/ϱ}`, right-endpoint piecewise-constant in time.
pub fn lp_distance(a: &[Vector], b: &[Vector], space: &DiscreteSpace, grid: &TimeGrid, exponent: f64) -> f64 {
    let dt = grid.dt();
    let sum: f64 = a.iter().zip(b).skip(1).map(|(x, y)| dt * space.v_norm(&(x - y)).powf(exponent)).sum();
    sum.powf(1.0 / exponent)
}

fn difference_quotient(u_tau: &Trajectory, u: &Trajectory, tau: f64) -> Vec<Vector> {
    u_tau.values.iter().zip(&u.values).map(|(a, b)| (a - b) / tau).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub taus: Vec<f64>,
    pub errors: Vec<f64>,
    pub exponent: f64,
    pub derivative: DerivativeTrajectory,
}

impl FdReport {
    /// Nonincreasing after the first entry, up to increases within `noise_floor`.
    pub fn is_nonincreasing(&self, noise_floor: f64) -> bool {
        self.errors.windows(2).all(|w| w[1] <= w[0] || w[1] <= noise_floor)
    }

    /// Final error at most `max(floor, first/10)`.
    pub fn final_within(&self, floor: f64) -> bool {
        match (self.errors.first(), self.errors.last()) {
            (Some(first), Some(last)) => *last <= floor.max(first / 10.0),
            _ => true,
        }
    }
}

fn check_taus(taus: &[f64], exponent: f64) -> Result<(), SolverError> {
    if taus.is_empty() || taus.iter().any(|t| !(*t > 0.0)) || taus.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(SolverError::InvalidArgument("taus must be positive and strictly decreasing".into()));
    }
    if !(exponent > 1.0 && exponent.is_finite()) {
        return Err(SolverError::InvalidArgument(format!("exponent must lie in (1, ∞), got {exponent}")));
    }
    Ok(())
}

/// Compares `(S(f + τ δf) − S(f))/τ` with the derivative for each `τ`.
pub fn fd_validate(
    p: &HdviProblem,
    delta_f: &LoadHistory,
    taus: &[f64],
    exponent: f64,
    tol: f64,
) -> Result<FdReport, SolverError> {
    fd_validate_with(p, delta_f, taus, exponent, tol, &Thresholds::default())
}

pub fn fd_validate_with(
    p: &HdviProblem,
    delta_f: &LoadHistory,
    taus: &[f64],
    exponent: f64,
    tol: f64,
    thresholds: &Thresholds,
) -> Result<FdReport, SolverError> {
    check_taus(taus, exponent)?;
    let solver = EviSolver::new(p)?;
    let base = solve_forward_with(&solver, p.load(), tol)?;
    let derivative = DerivativeSolver::new(p, &base, thresholds)?.solve(delta_f, tol)?;
    let errors = taus
        .par_iter()
        .map(|&tau| {
            let u_tau = solve_forward_with(&solver, &p.load().axpy(tau, delta_f), tol)?;
            let q = difference_quotient(&u_tau, &base, tau);
            Ok(lp_distance(&q, &derivative.values, p.space(), p.grid(), exponent))
        })
        .collect::<Result<Vec<f64>, SolverError>>()?;
    Ok(FdReport { taus: taus.to_vec(), errors, exponent, derivative })
}

#[derive(Debug, Clone, PartialEq)]
pub struct HadamardReport {
    pub taus: Vec<f64>,
    /// Errors of `(S(f + τ_k z_k) − S(f))/τ_k`.
    pub diagonal_errors: Vec<f64>,
    /// Errors of `(S(f + τ_k δf) − S(f))/τ_k`.
    pub fd_errors: Vec<f64>,
    /// `max_n ‖z_k − δf‖_{V*}`.
    pub direction_gaps: Vec<f64>,
}

impl HadamardReport {
    /// `diag_k ≤ factor · max(fd_k, floor)` for every `k`.
    pub fn within_factor(&self, factor: f64, floor: f64) -> bool {
        self.diagonal_errors.iter().zip(&self.fd_errors).all(|(d, f)| *d <= factor * f.max(floor))
    }
}

/// Difference quotients along perturbed directions `z_k → δf` paired with `τ_k`.
pub fn hadamard_probe(
    p: &HdviProblem,
    delta_f: &LoadHistory,
    perturbations: &[LoadHistory],
    taus: &[f64],
    exponent: f64,
    tol: f64,
) -> Result<HadamardReport, SolverError> {
    hadamard_probe_with(p, delta_f, perturbations, taus, exponent, tol, &Thresholds::default())
}

pub fn hadamard_probe_with(
    p: &HdviProblem,
    delta_f: &LoadHistory,
    perturbations: &[LoadHistory],
    taus: &[f64],
    exponent: f64,
    tol: f64,
    thresholds: &Thresholds,
) -> Result<HadamardReport, SolverError> {
    check_taus(taus, exponent)?;
    if perturbations.len() != taus.len() {
        return Err(SolverError::DimensionMismatch { what: "perturbations", expected: taus.len(), found: perturbations.len() });
    }
    let solver = EviSolver::new(p)?;
    let base = solve_forward_with(&solver, p.load(), tol)?;
    let derivative = DerivativeSolver::new(p, &base, thresholds)?.solve(delta_f, tol)?;
    let pairs = taus
        .par_iter()
        .zip(perturbations.par_iter())
        .map(|(&tau, z)| {
            let on_diag = solve_forward_with(&solver, &p.load().axpy(tau, z), tol)?;
            let straight = solve_forward_with(&solver, &p.load().axpy(tau, delta_f), tol)?;
            let d = lp_distance(&difference_quotient(&on_diag, &base, tau), &derivative.values, p.space(), p.grid(), exponent);
            let f = lp_distance(&difference_quotient(&straight, &base, tau), &derivative.values, p.space(), p.grid(), exponent);
            let gap = z.axpy(-1.0, delta_f).c_dual_norm(p.space())?;
            Ok((d, f, gap))
        })
        .collect::<Result<Vec<_>, SolverError>>()?;
    Ok(HadamardReport {
        taus: taus.to_vec(),
        diagonal_errors: pairs.iter().map(|x| x.0).collect(),
        fd_errors: pairs.iter().map(|x| x.1).collect(),
        direction_gaps: pairs.iter().map(|x| x.2).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::DenseMatrix;
    use crate::evi::ConeTag;
    use crate::hdvi::solve_forward;
    use crate::model::{build_rod_example, rod_contact_dof, ConstraintSet, ProblemOptions, RelaxationKernel};
    use crate::model::ComplianceLaw;

    const TOL: f64 = 1e-10;
    const TAUS: [f64; 4] = [1e-1, 1e-2, 1e-3, 1e-4];

    /// Independent linear Volterra marching: `(W + Δt w_nn ε*R(0)D) δu_n = δf_n − ε*(history)`.
    fn linear_marching(p: &HdviProblem, delta_f: &LoadHistory, start: Option<Vector>) -> Vec<Vector> {
        let grid = p.grid();
        let dt = grid.dt();
        let d = p.space().strain_map();
        let mut out: Vec<Vector> = Vec::new();
        for n in 0..grid.len() {
            let mut hist = Vector::zeros(p.space().n_strain());
            for k in 0..n {
                let w = if k == 0 { 0.5 } else { 1.0 };
                hist += &p.lags()[n - k] * (d * &out[k]) * (w * dt);
            }
            let rhs = delta_f.at(n) - p.space().adjoint_strain(&hist);
            let self_w = if n == 0 { 0.0 } else { 0.5 * dt };
            let a = p.operator() + p.space().assemble(&p.lags()[0]) * self_w;
            let v = match (&start, n) {
                (Some(s), 0) => s.clone(),
                _ => a.lu().solve(&rhs).unwrap(),
            };
            out.push(v);
        }
        out
    }

    fn rod(n: usize, steps: usize) -> HdviProblem {
        build_rod_example(n, TimeGrid::new(1.0, steps).unwrap()).unwrap()
    }

    #[test]
    fn rod_scaling_direction_matches_linear_oracle() {
        let p = rod(8, 50);
        let u = solve_forward(&p, TOL).unwrap();
        let d = solve_derivative(&p, &u, p.load(), TOL).unwrap();
        let contact = rod_contact_dof(8);
        assert_eq!(d.cones[0].tag(contact), ConeTag::Nonpositive);
        assert!(d.cones[1..].iter().all(|c| c.is_all_free()));
        // at t = 0 the outward push is absorbed by the bound
        assert!(d.values[0].amax() <= 10.0 * TOL);
        let oracle = linear_marching(&p, p.load(), Some(Vector::zeros(8)));
        for (a, b) in d.values.iter().zip(&oracle) {
            assert!((a - b).amax() <= 10.0 * TOL);
        }
        assert!(d.residuals.iter().all(|r| *r <= 10.0 * TOL));
    }

    #[test]
    fn zero_direction_gives_zero() {
        let p = rod(6, 20);
        let u = solve_forward(&p, TOL).unwrap();
        let d = solve_derivative(&p, &u, &LoadHistory::zeros(*p.grid(), 6), TOL).unwrap();
        assert!(d.values.iter().all(|v| v.amax() == 0.0));
    }

    fn unconstrained(p: &HdviProblem, kernel: RelaxationKernel) -> HdviProblem {
        HdviProblem::new(
            p.space().clone(),
            p.stiffness().clone(),
            kernel,
            ComplianceLaw::none(),
            ConstraintSet::unconstrained(p.n_dof()),
            p.load().clone(),
            *p.grid(),
            ProblemOptions::default(),
        )
        .unwrap()
    }

    #[test]
    fn all_free_matches_linear_oracle() {
        let base = rod(5, 30);
        let k = DenseMatrix::from_fn(5, 5, |i, j| if i == j { 0.7 } else { 0.1 });
        let p = unconstrained(&base, RelaxationKernel::constant(k).unwrap());
        let u = solve_forward(&p, TOL).unwrap();
        let df = LoadHistory::from_fn(*p.grid(), |t| Vector::from_fn(5, |i, _| (i as f64 - 2.0) * (1.0 + 3.0 * t).cos()))
            .unwrap();
        let d = solve_derivative(&p, &u, &df, TOL).unwrap();
        let oracle = linear_marching(&p, &df, None);
        for (a, b) in d.values.iter().zip(&oracle) {
            assert!((a - b).amax() <= 10.0 * TOL);
        }
    }

    #[test]
    fn rod_fd_errors_decrease() {
        let p = rod(8, 100);
        let rep = fd_validate(&p, p.load(), &TAUS, 2.0, TOL).unwrap();
        assert!(rep.is_nonincreasing(10.0 * TOL), "{:?}", rep.errors);
        assert!(*rep.errors.last().unwrap() <= 1e-3);
        assert!(rep.final_within(10.0 * TOL));
    }

    #[test]
    fn zero_direction_fd_errors_vanish() {
        let p = rod(6, 20);
        let rep = fd_validate(&p, &LoadHistory::zeros(*p.grid(), 6), &TAUS, 2.0, TOL).unwrap();
        assert!(rep.errors.iter().all(|e| *e <= 10.0 * TOL));
    }

    #[test]
    fn linear_instance_fd_errors_at_solver_level() {
        let p = unconstrained(&rod(5, 20), RelaxationKernel::zero(5));
        let df = LoadHistory::constant(*p.grid(), Vector::from_fn(5, |i, _| i as f64 - 1.0));
        let rep = fd_validate(&p, &df, &TAUS, 2.0, TOL).unwrap();
        // round-off of S is amplified by 1/τ
        for (e, tau) in rep.errors.iter().zip(TAUS) {
            assert!(*e <= 10.0 * TOL.max(1e-14 / tau), "{e} at τ = {tau}");
        }
    }

    #[test]
    fn hadamard_probe_reduces_to_fd_for_constant_sequence() {
        let p = rod(6, 40);
        let perts = vec![p.load().clone(); TAUS.len()];
        let rep = hadamard_probe(&p, p.load(), &perts, &TAUS, 2.0, TOL).unwrap();
        assert_eq!(rep.diagonal_errors, rep.fd_errors);
        let fd = fd_validate(&p, p.load(), &TAUS, 2.0, TOL).unwrap();
        assert_eq!(rep.fd_errors, fd.errors);
    }

    #[test]
    fn hadamard_probe_scaled_sequence() {
        let p = rod(6, 40);
        let perts: Vec<LoadHistory> = TAUS.iter().map(|t| p.load().scaled(1.0 + t)).collect();
        let rep = hadamard_probe(&p, p.load(), &perts, &TAUS, 2.0, TOL).unwrap();
        let floor = (10.0 * TOL).max(rep.fd_errors[0] / 10.0);
        assert!(rep.within_factor(2.0, floor), "{:?} vs {:?}", rep.diagonal_errors, rep.fd_errors);
        assert!(rep.diagonal_errors.last().unwrap() <= &(2.0 * rep.fd_errors.last().unwrap().max(floor)));
    }

    #[test]
    fn positive_homogeneity_and_cone_membership() {
        let p = rod(6, 40);
        let u = solve_forward(&p, TOL).unwrap();
        let ds = DerivativeSolver::new(&p, &u, &Thresholds::default()).unwrap();
        let df = LoadHistory::from_fn(*p.grid(), |t| Vector::from_fn(6, |i, _| (i as f64 + t).sin())).unwrap();
        let a = ds.solve(&df, TOL).unwrap();
        let b = ds.solve(&df.scaled(2.0), TOL).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x * 2.0 - y).amax() <= 10.0 * TOL);
        }
        for (v, cone) in a.values.iter().zip(&a.cones) {
            for &(dof, tag) in &cone.tags {
                match tag {
                    ConeTag::Zero => assert_eq!(v[dof], 0.0),
                    ConeTag::Nonpositive => assert!(v[dof] <= 0.0),
                    ConeTag::Free => {}
                }
            }
        }
    }
}
