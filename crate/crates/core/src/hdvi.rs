//! Forward solution of the history-dependent inequality: time marching, the
//! history operator `Λ`, Picard sweeps and the residual checks tying them together.

use rayon::prelude::*;

use crate::algebra::{Quadrature, TimeGrid, Vector};
use crate::error::SolverError;
use crate::evi::EviSolver;
use crate::model::{derived_constants, DiscreteSpace, HdviProblem, LoadHistory};

/// Inner self-term iterations per node.
pub const MAX_INNER_ITERATIONS: usize = 100;
/// Inner loops and nodal solves run this much tighter than the outer tolerance.
pub const INNER_TOL_FACTOR: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NodeMeta {
    pub vi_residual: f64,
    pub inner_iterations: usize,
    pub evi_iterations: usize,
}

/// Displacements at the grid nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub grid: TimeGrid,
    pub values: Vec<Vector>,
    pub meta: Vec<NodeMeta>,
}

impl Trajectory {
    pub fn new(grid: TimeGrid, values: Vec<Vector>) -> Result<Self, SolverError> {
        if values.len() != grid.len() {
            return Err(SolverError::DimensionMismatch { what: "trajectory nodes", expected: grid.len(), found: values.len() });
        }
        let meta = vec![NodeMeta::default(); values.len()];
        Ok(Self { grid, values, meta })
    }

    pub fn zeros(grid: TimeGrid, n_dof: usize) -> Self {
        Self { grid, values: vec![Vector::zeros(n_dof); grid.len()], meta: vec![NodeMeta::default(); grid.len()] }
    }

    pub fn from_fn<F: Fn(f64) -> Vector>(grid: TimeGrid, f: F) -> Self {
        let values = grid.nodes().into_iter().map(f).collect();
        Self { grid, values, meta: vec![NodeMeta::default(); grid.len()] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn last(&self) -> &Vector {
        self.values.last().expect("a trajectory has at least one node")
    }

    /// `max_n ‖u_n − v_n‖_G`.
    pub fn c_distance(&self, other: &Trajectory, space: &DiscreteSpace) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| space.v_norm(&(a - b))).fold(0.0, f64::max)
    }

    pub fn c_norm(&self, space: &DiscreteSpace) -> f64 {
        self.values.iter().map(|a| space.v_norm(a)).fold(0.0, f64::max)
    }

    /// `max_{n,i} |u_n,i − v_n,i|`.
    pub fn max_abs_difference(&self, other: &Trajectory) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b).amax()).fold(0.0, f64::max)
    }
}

/// Discrete Volterra memory `∫_0^{t_n} R(t_n − s) ε(u(s)) ds` on the problem grid.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Memory<'a> {
    p: &'a HdviProblem,
}

impl<'a> Memory<'a> {
    pub fn new(p: &'a HdviProblem) -> Self {
        Self { p }
    }

    pub fn strains(&self, values: &[Vector]) -> Vec<Vector> {
        values.iter().map(|u| self.p.space().strain(u)).collect()
    }

    /// Quadrature over nodes `0..n` excluding the current node.
    pub fn history(&self, strains: &[Vector], n: usize) -> Vector {
        let rule = self.p.quadrature();
        let dt = self.p.grid().dt();
        let lags = self.p.lags();
        let mut out = Vector::zeros(self.p.space().n_strain());
        for (k, s) in strains.iter().enumerate().take(n) {
            let w = rule.weight(k, n);
            if w != 0.0 {
                out.gemv(w * dt, &lags[n - k], s, 1.0);
            }
        }
        out
    }

    /// Weight `Δt·w_{n,n}` of the current node.
    pub fn self_weight(&self, n: usize) -> f64 {
        self.p.quadrature().self_weight(n) * self.p.grid().dt()
    }

    /// Contribution of the current node's strain.
    pub fn self_term(&self, strain: &Vector, n: usize) -> Vector {
        &self.p.lags()[0] * strain * self.self_weight(n)
    }

    /// Full quadrature including the current node.
    pub fn full(&self, strains: &[Vector], n: usize) -> Vector {
        let mut out = self.history(strains, n);
        if self.self_weight(n) != 0.0 {
            out += self.self_term(&strains[n], n);
        }
        out
    }

    /// `ε*` of a strain-space memory term.
    pub fn dual(&self, memory: &Vector) -> Vector {
        self.p.space().adjoint_strain(memory)
    }
}

/// `(Δt/2)·‖R(0)‖/m_B`, the contraction factor of the implicit self term.
pub fn step_contraction_factor(p: &HdviProblem) -> f64 {
    match p.quadrature() {
        Quadrature::LeftRectangle => 0.0,
        Quadrature::Trapezoid => 0.5 * p.grid().dt() * p.space().q_operator_norm(&p.lags()[0]) / p.m_b(),
    }
}

pub(crate) fn check_step_contraction(p: &HdviProblem) -> Result<(), SolverError> {
    let factor = step_contraction_factor(p);
    if factor >= 1.0 {
        return Err(SolverError::StepContractionViolated { factor });
    }
    Ok(())
}

fn check_tol(tol: f64) -> Result<(), SolverError> {
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(SolverError::InvalidArgument(format!("tolerance must be positive, got {tol}")));
    }
    Ok(())
}

/// Marches the problem through the grid with the problem's own load.
pub fn solve_forward(p: &HdviProblem, tol: f64) -> Result<Trajectory, SolverError> {
    solve_forward_with(&EviSolver::new(p)?, p.load(), tol)
}

/// Marches with a prepared nodal solver and an explicit load.
pub fn solve_forward_with(solver: &EviSolver<'_>, load: &LoadHistory, tol: f64) -> Result<Trajectory, SolverError> {
    let p = solver.problem();
    check_tol(tol)?;
    check_step_contraction(p)?;
    if load.dim() != p.n_dof() || load.grid() != p.grid() {
        return Err(SolverError::DimensionMismatch { what: "load", expected: p.n_dof(), found: load.dim() });
    }
    let memory = Memory::new(p);
    let inner_tol = tol * INNER_TOL_FACTOR;
    let grid = *p.grid();
    let mut values: Vec<Vector> = Vec::with_capacity(grid.len());
    let mut strains: Vec<Vector> = Vec::with_capacity(grid.len());
    let mut meta = Vec::with_capacity(grid.len());
    for n in 0..grid.len() {
        let base = load.at(n) - memory.dual(&memory.history(&strains, n));
        let mut u = values.last().cloned().unwrap_or_else(|| Vector::zeros(p.n_dof()));
        let mut inner = 0;
        let mut evi_iterations = 0;
        let omega = if memory.self_weight(n) == 0.0 {
            let r = solver.solve(&base, &u, inner_tol)?;
            u = r.z;
            evi_iterations += r.iterations;
            base
        } else {
            let mut converged = false;
            let mut change = f64::INFINITY;
            while inner < MAX_INNER_ITERATIONS {
                inner += 1;
                let omega = &base - memory.dual(&memory.self_term(&p.space().strain(&u), n));
                let r = solver.solve(&omega, &u, inner_tol)?;
                evi_iterations += r.iterations;
                change = p.space().v_norm(&(&r.z - &u));
                u = r.z;
                if change <= inner_tol {
                    converged = true;
                    break;
                }
            }
            if !converged {
                return Err(SolverError::MaxIterations { iterations: inner, residual: change });
            }
            &base - memory.dual(&memory.self_term(&p.space().strain(&u), n))
        };
        meta.push(NodeMeta { vi_residual: solver.residual(&u, &omega), inner_iterations: inner, evi_iterations });
        strains.push(p.space().strain(&u));
        values.push(u);
    }
    Ok(Trajectory { grid, values, meta })
}

/// `(Λu)_n = F(f_n − ε*(memory of u up to t_n))`, with the given `u` in the memory.
pub fn apply_lambda(p: &HdviProblem, u: &Trajectory, tol: f64) -> Result<Trajectory, SolverError> {
    apply_lambda_with(&EviSolver::new(p)?, p.load(), u, tol)
}

pub fn apply_lambda_with(
    solver: &EviSolver<'_>,
    load: &LoadHistory,
    u: &Trajectory,
    tol: f64,
) -> Result<Trajectory, SolverError> {
    let p = solver.problem();
    check_tol(tol)?;
    if u.grid != *p.grid() || u.len() != p.grid().len() {
        return Err(SolverError::DimensionMismatch { what: "trajectory nodes", expected: p.grid().len(), found: u.len() });
    }
    let memory = Memory::new(p);
    let strains = memory.strains(&u.values);
    let inner_tol = tol * INNER_TOL_FACTOR;
    let nodes: Vec<(Vector, NodeMeta)> = (0..u.len())
        .into_par_iter()
        .map(|n| {
            let omega = load.at(n) - memory.dual(&memory.full(&strains, n));
            let r = solver.solve(&omega, &u.values[n], inner_tol)?;
            Ok((r.z, NodeMeta { vi_residual: r.residual, inner_iterations: 0, evi_iterations: r.iterations }))
        })
        .collect::<Result<_, SolverError>>()?;
    let (values, meta) = nodes.into_iter().unzip();
    Ok(Trajectory { grid: u.grid, values, meta })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PicardResult {
    pub trajectory: Trajectory,
    /// `max_n ‖(Λu)_n − u_n‖_G` of every evaluation of `Λ`.
    pub changes: Vec<f64>,
    /// Sweeps that changed the iterate by more than `tol`.
    pub sweeps: usize,
}

impl PicardResult {
    /// Ratios of consecutive changes.
    pub fn contraction_history(&self) -> Vec<f64> {
        self.changes.windows(2).map(|w| if w[0] > 0.0 { w[1] / w[0] } else { 0.0 }).collect()
    }
}

/// Iterates `u ← Λu` until the update is at most `tol` on every node.
pub fn solve_picard(p: &HdviProblem, u0: &Trajectory, tol: f64, max_sweeps: usize) -> Result<PicardResult, SolverError> {
    let solver = EviSolver::new(p)?;
    let mut u = u0.clone();
    let mut changes = Vec::new();
    for _ in 0..=max_sweeps {
        let next = apply_lambda_with(&solver, p.load(), &u, tol)?;
        let change = next.c_distance(&u, p.space());
        changes.push(change);
        u = next;
        if change <= tol {
            let sweeps = changes.len() - 1;
            return Ok(PicardResult { trajectory: u, changes, sweeps });
        }
    }
    Err(SolverError::MaxSweeps { sweeps: max_sweeps, change: *changes.last().unwrap_or(&f64::INFINITY) })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceReport {
    pub max_vi_residual: f64,
    pub max_fixedpoint_residual: f64,
    pub vi_residuals: Vec<f64>,
    pub fixedpoint_residuals: Vec<f64>,
}

/// Nodal inequality residuals and `‖u_n − (Λu)_n‖_G` of a feasible trajectory;
/// `tol` is the accuracy of the nodal solves inside `Λ`.
pub fn equivalence_check(p: &HdviProblem, u: &Trajectory, tol: f64) -> Result<EquivalenceReport, SolverError> {
    let solver = EviSolver::new(p)?;
    let memory = Memory::new(p);
    let strains = memory.strains(&u.values);
    let vi_residuals: Vec<f64> = (0..u.len())
        .map(|n| {
            let omega = p.load().at(n) - memory.dual(&memory.full(&strains, n));
            solver.residual(&u.values[n], &omega)
        })
        .collect();
    let lam = apply_lambda_with(&solver, p.load(), u, tol)?;
    let fixedpoint_residuals: Vec<f64> =
        u.values.iter().zip(&lam.values).map(|(a, b)| p.space().v_norm(&(a - b))).collect();
    Ok(EquivalenceReport {
        max_vi_residual: vi_residuals.iter().copied().fold(0.0, f64::max),
        max_fixedpoint_residual: fixedpoint_residuals.iter().copied().fold(0.0, f64::max),
        vi_residuals,
        fixedpoint_residuals,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipschitzReport {
    pub ratio: f64,
    pub bound: f64,
    pub solution_distance: f64,
    pub load_distance: f64,
}

/// `max_n ‖u_n − ũ_n‖_V / max_n ‖f_n − f̃_n‖_{V*}` for the solutions of both loads.
pub fn lipschitz_probe(p: &HdviProblem, other: &LoadHistory, tol: f64) -> Result<LipschitzReport, SolverError> {
    let diff = p.load().axpy(-1.0, other);
    let load_distance = diff.c_dual_norm(p.space())?;
    if load_distance == 0.0 {
        return Err(SolverError::DegenerateDenominator);
    }
    let solver = EviSolver::new(p)?;
    let u = solve_forward_with(&solver, p.load(), tol)?;
    let v = solve_forward_with(&solver, other, tol)?;
    let solution_distance = u.c_distance(&v, p.space());
    Ok(LipschitzReport {
        ratio: solution_distance / load_distance,
        bound: derived_constants(p).k,
        solution_distance,
        load_distance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::DenseMatrix;
    use crate::model::{
        build_rod_example, rod_nodes, ComplianceLaw, ConstraintSet, KernelKind, ProblemOptions, RelaxationKernel,
    };
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const TOL: f64 = 1e-10;

    fn rod_error(n: usize, steps: usize, rule: Quadrature) -> f64 {
        let p = build_rod_example(n, TimeGrid::new(1.0, steps).unwrap()).unwrap().with_quadrature(rule);
        let u = solve_forward(&p, TOL).unwrap();
        let x = rod_nodes(n);
        let mut err: f64 = 0.0;
        for (k, t) in p.grid().nodes().iter().enumerate() {
            for i in 0..n {
                err = err.max((u.values[k][i] - x[i] * (-t).exp()).abs());
            }
        }
        err
    }

    #[test]
    fn rod_matches_closed_form() {
        assert!(rod_error(16, 200, Quadrature::Trapezoid) <= 1e-3);
    }

    #[test]
    fn rod_convergence_orders() {
        let ratio = rod_error(4, 50, Quadrature::Trapezoid) / rod_error(4, 100, Quadrature::Trapezoid);
        assert!(ratio >= 3.5, "trapezoid ratio {ratio}");
        let ratio = rod_error(4, 50, Quadrature::LeftRectangle) / rod_error(4, 100, Quadrature::LeftRectangle);
        assert!(ratio >= 1.8, "left rectangle ratio {ratio}");
    }

    fn with_kernel_and_load(p: &HdviProblem, kernel: RelaxationKernel, load: LoadHistory, bounds: Vec<(usize, f64)>) -> HdviProblem {
        HdviProblem::new(
            p.space().clone(),
            p.stiffness().clone(),
            kernel,
            ComplianceLaw::none(),
            ConstraintSet::new(p.n_dof(), bounds).unwrap(),
            load,
            *p.grid(),
            ProblemOptions::default(),
        )
        .unwrap()
    }

    #[test]
    fn zero_load_gives_zero() {
        let rod = build_rod_example(6, TimeGrid::new(1.0, 20).unwrap()).unwrap();
        let p = rod.with_load(LoadHistory::zeros(*rod.grid(), 6)).unwrap();
        let u = solve_forward(&p, TOL).unwrap();
        assert!(u.values.iter().all(|v| v.amax() == 0.0));
    }

    #[test]
    fn memory_free_unconstrained_is_nodal_linear_solve() {
        let rod = build_rod_example(5, TimeGrid::new(1.0, 10).unwrap()).unwrap();
        let load = LoadHistory::from_fn(*rod.grid(), |t| Vector::from_fn(5, |i, _| (i as f64 + 1.0) * (1.0 + t).sin())).unwrap();
        let p = with_kernel_and_load(&rod, RelaxationKernel::zero(5), load, vec![]);
        let u = solve_forward(&p, TOL).unwrap();
        let lu = p.operator().clone().lu();
        for n in 0..p.grid().len() {
            let direct = lu.solve(p.load().at(n)).unwrap();
            assert!((&u.values[n] - direct).amax() <= 10.0 * TOL);
        }
    }

    #[test]
    fn lambda_fixed_point_and_zero_input() {
        let p = build_rod_example(8, TimeGrid::new(1.0, 40).unwrap()).unwrap();
        let u = solve_forward(&p, TOL).unwrap();
        let lam = apply_lambda(&p, &u, TOL).unwrap();
        assert!(lam.c_distance(&u, p.space()) <= 10.0 * TOL);

        let zero = Trajectory::zeros(*p.grid(), 8);
        let lam = apply_lambda(&p, &zero, TOL).unwrap();
        let x = Vector::from_vec(rod_nodes(8));
        for v in &lam.values {
            assert!((v - &x).amax() <= 1e-12);
        }
    }

    #[test]
    fn lambda_ignores_input_without_memory() {
        let rod = build_rod_example(4, TimeGrid::new(1.0, 10).unwrap()).unwrap();
        let p = with_kernel_and_load(&rod, RelaxationKernel::zero(4), rod.load().clone(), vec![(3, 1.0)]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let values = (0..p.grid().len()).map(|_| Vector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0))).collect();
        let a = Trajectory::new(*p.grid(), values).unwrap();
        let b = Trajectory::from_fn(*p.grid(), |_| Vector::from_fn(4, |_, _| 3.0));
        let la = apply_lambda(&p, &a, TOL).unwrap();
        let lb = apply_lambda(&p, &b, TOL).unwrap();
        assert!(la.max_abs_difference(&lb) <= 10.0 * TOL);
    }

    #[test]
    fn picard_agrees_with_marching() {
        let p = build_rod_example(8, TimeGrid::new(1.0, 40).unwrap()).unwrap();
        let u = solve_forward(&p, TOL).unwrap();
        let pic = solve_picard(&p, &Trajectory::zeros(*p.grid(), 8), TOL, 200).unwrap();
        assert!(pic.trajectory.max_abs_difference(&u) <= 20.0 * TOL);
        // the change sequence is eventually monotone
        let tail = &pic.changes[pic.changes.len() / 2..];
        assert!(tail.windows(2).all(|w| w[1] <= w[0]), "{:?}", pic.changes);
    }

    #[test]
    fn picard_without_memory_takes_one_sweep() {
        let rod = build_rod_example(4, TimeGrid::new(1.0, 10).unwrap()).unwrap();
        let p = with_kernel_and_load(&rod, RelaxationKernel::zero(4), rod.load().clone(), vec![(3, 1.0)]);
        let pic = solve_picard(&p, &Trajectory::zeros(*p.grid(), 4), TOL, 10).unwrap();
        assert_eq!(pic.sweeps, 1);
    }

    #[test]
    fn picard_reports_max_sweeps() {
        let p = build_rod_example(4, TimeGrid::new(1.0, 10).unwrap()).unwrap();
        let err = solve_picard(&p, &Trajectory::zeros(*p.grid(), 4), TOL, 2).unwrap_err();
        assert!(matches!(err, SolverError::MaxSweeps { sweeps: 2, .. }));
    }

    #[test]
    fn equivalence_residuals() {
        let p = build_rod_example(8, TimeGrid::new(1.0, 40).unwrap()).unwrap();
        let u = solve_forward(&p, TOL).unwrap();
        let rep = equivalence_check(&p, &u, TOL).unwrap();
        assert!(rep.max_vi_residual <= 10.0 * TOL && rep.max_fixedpoint_residual <= 10.0 * TOL);

        let mut bumped = u.clone();
        bumped.values[20][3] += 1e-3;
        let rep = equivalence_check(&p, &bumped, TOL).unwrap();
        assert!(rep.max_vi_residual > 10.0 * TOL && rep.max_fixedpoint_residual > 10.0 * TOL);

        let rep = equivalence_check(&p, &Trajectory::zeros(*p.grid(), 8), TOL).unwrap();
        assert!(rep.max_vi_residual >= 0.1 && rep.max_fixedpoint_residual >= 0.1);
    }

    #[test]
    fn step_contraction_is_checked() {
        let rod = build_rod_example(4, TimeGrid::new(1.0, 2).unwrap()).unwrap();
        let big = RelaxationKernel::constant(DenseMatrix::identity(4, 4) * 8.0).unwrap();
        let p = with_kernel_and_load(&rod, big, rod.load().clone(), vec![(3, 1.0)]);
        assert!(matches!(solve_forward(&p, TOL), Err(SolverError::StepContractionViolated { .. })));
    }

    #[test]
    fn lipschitz_probe_examples() {
        let p = build_rod_example(8, TimeGrid::new(1.0, 50).unwrap()).unwrap();
        let rep = lipschitz_probe(&p, &p.load().scaled(1.1), TOL).unwrap();
        assert!(rep.ratio <= std::f64::consts::E + 0.01);
        assert!((rep.bound - std::f64::consts::E).abs() < 1e-12);

        let shift = Vector::from_fn(8, |i, _| if i == 2 { 1.0 } else { 0.0 });
        let shift = &shift * (1e-6 / p.space().dual_norm(&shift).unwrap());
        let other = p.load().axpy(1.0, &LoadHistory::constant(*p.grid(), shift));
        let rep = lipschitz_probe(&p, &other, TOL).unwrap();
        assert!(rep.ratio <= rep.bound);

        assert!(matches!(lipschitz_probe(&p, p.load(), TOL), Err(SolverError::DegenerateDenominator)));

        let free = with_kernel_and_load(&p, RelaxationKernel::zero(8), p.load().clone(), vec![]);
        let rep = lipschitz_probe(&free, &free.load().scaled(0.5), TOL).unwrap();
        assert!(rep.ratio <= 1.0 / free.m_b() + 1e-9);
    }

    #[test]
    fn exponential_kernel_runs() {
        let rod = build_rod_example(4, TimeGrid::new(1.0, 20).unwrap()).unwrap();
        let k = RelaxationKernel::new(KernelKind::Exponential { matrix: DenseMatrix::identity(4, 4), rate: 2.0 }, None).unwrap();
        let p = with_kernel_and_load(&rod, k, rod.load().clone(), vec![(3, 1.0)]);
        let u = solve_forward(&p, TOL).unwrap();
        let rep = equivalence_check(&p, &u, TOL).unwrap();
        assert!(rep.max_fixedpoint_residual <= 10.0 * TOL);
    }
}
