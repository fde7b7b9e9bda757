//! Load control: the control-to-load map, the tracking cost with an H¹-in-time
//! penalty, and a projected descent driven by directional derivatives.

use rayon::prelude::*;
use serde::Serialize;

use crate::algebra::{DenseMatrix, TimeGrid, Vector};
use crate::error::SolverError;
use crate::evi::{EviSolver, Thresholds};
use crate::hdvi::{solve_forward_with, Trajectory};
use crate::model::{HdviProblem, LoadHistory};
use crate::sensitivity::DerivativeSolver;

/// Box on one control component; `None` means unbounded on that side.
pub type ControlBound = (Option<f64>, Option<f64>);

/// Control values at the grid nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Control {
    pub samples: Vec<Vector>,
    /// Per-component box applied at every node.
    pub bounds: Option<Vec<ControlBound>>,
}

impl Control {
    pub fn new(samples: Vec<Vector>, bounds: Option<Vec<ControlBound>>) -> Result<Self, SolverError> {
        let dim = samples.first().map_or(0, |v| v.len());
        if samples.iter().any(|v| v.len() != dim) {
            return Err(SolverError::InvalidArgument("control samples differ in length".into()));
        }
        if let Some(b) = &bounds {
            if b.len() != dim {
                return Err(SolverError::DimensionMismatch { what: "control bounds", expected: dim, found: b.len() });
            }
            if b.iter().any(|(lo, hi)| matches!((lo, hi), (Some(l), Some(h)) if l > h)) {
                return Err(SolverError::InvalidArgument("control bound with lower > upper".into()));
            }
        }
        Ok(Self { samples, bounds })
    }

    pub fn constant(grid: &TimeGrid, value: Vector, bounds: Option<Vec<ControlBound>>) -> Result<Self, SolverError> {
        Self::new(vec![value; grid.len()], bounds)
    }

    pub fn dim(&self) -> usize {
        self.samples.first().map_or(0, |v| v.len())
    }

    fn bound(&self, j: usize) -> ControlBound {
        self.bounds.as_ref().map_or((None, None), |b| b[j])
    }

    pub fn project(&self) -> Self {
        let samples = self
            .samples
            .iter()
            .map(|v| Vector::from_iterator(v.len(), v.iter().enumerate().map(|(j, x)| clamp(*x, self.bound(j)))))
            .collect();
        Self { samples, bounds: self.bounds.clone() }
    }

    pub fn is_feasible(&self) -> bool {
        self.samples.iter().all(|v| v.iter().enumerate().all(|(j, x)| clamp(*x, self.bound(j)) == *x))
    }

    /// `self + s·d`, projected onto the bounds.
    fn step(&self, s: f64, d: &[Vector]) -> Self {
        let samples = self.samples.iter().zip(d).map(|(g, dg)| g + dg * s).collect();
        Self { samples, bounds: self.bounds.clone() }.project()
    }
}

fn clamp(x: f64, (lo, hi): ControlBound) -> f64 {
    let x = hi.map_or(x, |h| x.min(h));
    lo.map_or(x, |l| x.max(l))
}

/// Which part of the load the control drives.
#[derive(Debug, Clone, PartialEq)]
pub enum MapKind {
    /// Body force and traction are both controlled; no fixed load.
    BodyAndTraction,
    /// Only the traction is controlled, on top of a fixed load.
    TractionOnly { fixed: LoadHistory },
}

/// Linear control-to-load map `f_n = fixed_n + A g_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlMap {
    pub kind: MapKind,
    /// Assembly `A` (dofs × control components).
    pub assembly: DenseMatrix,
    /// Weights of the control-space inner product.
    pub z_weights: Vector,
}

impl ControlMap {
    pub fn new(kind: MapKind, assembly: DenseMatrix, z_weights: Vector) -> Result<Self, SolverError> {
        if z_weights.len() != assembly.ncols() {
            return Err(SolverError::DimensionMismatch {
                what: "control weights",
                expected: assembly.ncols(),
                found: z_weights.len(),
            });
        }
        if z_weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(SolverError::InvalidArgument("control weights must be positive".into()));
        }
        if let MapKind::TractionOnly { fixed } = &kind {
            if fixed.dim() != assembly.nrows() {
                return Err(SolverError::DimensionMismatch { what: "fixed load", expected: assembly.nrows(), found: fixed.dim() });
            }
        }
        Ok(Self { kind, assembly, z_weights })
    }

    pub fn z_inner(&self, a: &Vector, b: &Vector) -> f64 {
        a.iter().zip(b.iter()).zip(self.z_weights.iter()).map(|((x, y), w)| w * x * y).sum()
    }

    /// Load increment of a control direction, without the fixed part.
    pub fn linear_part(&self, grid: &TimeGrid, h: &[Vector]) -> Result<LoadHistory, SolverError> {
        let values = h.iter().map(|v| &self.assembly * v).collect();
        Ok(LoadHistory::new(*grid, values)?)
    }
}

/// Rod traction at `x = 1`: one control component acting on the last dof.
pub fn rod_traction_map(n_elements: usize, fixed: LoadHistory) -> Result<ControlMap, SolverError> {
    let mut a = DenseMatrix::zeros(n_elements, 1);
    a[(n_elements - 1, 0)] = 1.0;
    ControlMap::new(MapKind::TractionOnly { fixed }, a, Vector::from_element(1, 1.0))
}

/// Rod body force (lumped mass, one component per dof) followed by the traction.
pub fn rod_body_and_traction_map(n_elements: usize) -> Result<ControlMap, SolverError> {
    let h = 1.0 / n_elements as f64;
    let mut a = DenseMatrix::zeros(n_elements, n_elements + 1);
    for i in 0..n_elements {
        a[(i, i)] = if i + 1 == n_elements { 0.5 * h } else { h };
    }
    a[(n_elements - 1, n_elements)] = 1.0;
    let mut w = Vector::from_element(n_elements + 1, h);
    w[n_elements] = 1.0;
    ControlMap::new(MapKind::BodyAndTraction, a, w)
}

/// `f_n = fixed_n + A g_n`.
pub fn control_to_load(g: &Control, map: &ControlMap, grid: &TimeGrid) -> Result<LoadHistory, SolverError> {
    if g.samples.len() != grid.len() {
        return Err(SolverError::DimensionMismatch { what: "control nodes", expected: grid.len(), found: g.samples.len() });
    }
    if g.dim() != map.assembly.ncols() {
        return Err(SolverError::DimensionMismatch { what: "control", expected: map.assembly.ncols(), found: g.dim() });
    }
    let linear = map.linear_part(grid, &g.samples)?;
    match &map.kind {
        MapKind::BodyAndTraction => Ok(linear),
        MapKind::TractionOnly { fixed } => {
            if fixed.grid() != grid {
                return Err(SolverError::InvalidArgument("fixed load is sampled on a different grid".into()));
            }
            Ok(fixed.axpy(1.0, &linear))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostReport {
    pub tracking: f64,
    pub regularization: f64,
    pub total: f64,
}

/// Cost weights and target.
#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub alpha: f64,
    pub beta: f64,
    pub target: Vector,
}

impl Objective {
    pub fn new(alpha: f64, beta: f64, target: Vector) -> Result<Self, SolverError> {
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(SolverError::InvalidArgument(format!("alpha must be ≥ 0, got {alpha}")));
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(SolverError::InvalidArgument(format!("beta must be > 0, got {beta}")));
        }
        Ok(Self { alpha, beta, target })
    }
}

/// `Σ_n w_n ‖g_n‖²_Z + Σ_{n<M} Δt ‖(g_{n+1} − g_n)/Δt‖²_Z` with trapezoid weights `w_n`.
pub fn h1_norm_squared(samples: &[Vector], map: &ControlMap, grid: &TimeGrid) -> f64 {
    h1_inner(samples, samples, map, grid)
}

fn h1_inner(a: &[Vector], b: &[Vector], map: &ControlMap, grid: &TimeGrid) -> f64 {
    let dt = grid.dt();
    let w = grid.trapezoid_weights();
    let mass: f64 = a.iter().zip(b).zip(&w).map(|((x, y), wn)| wn * map.z_inner(x, y)).sum();
    let stiff: f64 = (0..a.len().saturating_sub(1))
        .map(|n| {
            let da = (&a[n + 1] - &a[n]) / dt;
            let db = (&b[n + 1] - &b[n]) / dt;
            dt * map.z_inner(&da, &db)
        })
        .sum();
    mass + stiff
}

/// Prepared cost evaluation for one problem and control map.
struct CostContext<'a> {
    p: &'a HdviProblem,
    solver: EviSolver<'a>,
    map: &'a ControlMap,
    objective: &'a Objective,
    tol: f64,
}

struct Evaluated {
    report: CostReport,
    trajectory: Trajectory,
    load: LoadHistory,
}

impl<'a> CostContext<'a> {
    fn new(p: &'a HdviProblem, map: &'a ControlMap, objective: &'a Objective, tol: f64) -> Result<Self, SolverError> {
        if objective.target.len() != p.n_dof() {
            return Err(SolverError::DimensionMismatch { what: "target", expected: p.n_dof(), found: objective.target.len() });
        }
        if map.assembly.nrows() != p.n_dof() {
            return Err(SolverError::DimensionMismatch { what: "control map", expected: p.n_dof(), found: map.assembly.nrows() });
        }
        Ok(Self { p, solver: EviSolver::new(p)?, map, objective, tol })
    }

    fn evaluate(&self, g: &Control) -> Result<Evaluated, SolverError> {
        let load = control_to_load(g, self.map, self.p.grid())?;
        let trajectory = solve_forward_with(&self.solver, &load, self.tol)?;
        let mismatch = trajectory.last() - &self.objective.target;
        let tracking = self.objective.alpha * self.p.space().v_inner(&mismatch, &mismatch);
        let regularization = self.objective.beta * h1_norm_squared(&g.samples, self.map, self.p.grid());
        let report = CostReport { tracking, regularization, total: tracking + regularization };
        Ok(Evaluated { report, trajectory, load })
    }
}

/// `α‖u(T) − u_d‖²_G + β‖g‖²_{H¹}` with `u` the solution for the load of `g`.
pub fn evaluate_cost(
    p: &HdviProblem,
    map: &ControlMap,
    g: &Control,
    objective: &Objective,
    tol: f64,
) -> Result<CostReport, SolverError> {
    Ok(CostContext::new(p, map, objective, tol)?.evaluate(g)?.report)
}

/// Directional derivatives of the cost at one control.
struct Linearization<'a> {
    ctx: &'a CostContext<'a>,
    g: &'a Control,
    derivative: Option<DerivativeSolver<'a>>,
    mismatch: Vector,
}

impl<'a> Linearization<'a> {
    fn new(ctx: &'a CostContext<'a>, g: &'a Control, at: &Evaluated, thresholds: &Thresholds) -> Result<Self, SolverError> {
        let derivative = if ctx.objective.alpha > 0.0 {
            Some(DerivativeSolver::with_load(ctx.p, &at.load, &at.trajectory, thresholds)?)
        } else {
            None
        };
        let mismatch = at.trajectory.last() - &ctx.objective.target;
        Ok(Self { ctx, g, derivative, mismatch })
    }

    fn is_linear(&self) -> bool {
        self.derivative.as_ref().is_none_or(|d| d.is_linear())
    }

    /// `2α⟨u(T) − u_d, δu(T)⟩_G + 2β⟨g, h⟩_{H¹}`.
    fn derivative(&self, h: &[Vector]) -> Result<f64, SolverError> {
        let grid = self.ctx.p.grid();
        let reg = 2.0 * self.ctx.objective.beta * h1_inner(&self.g.samples, h, self.ctx.map, grid);
        let track = match &self.derivative {
            None => 0.0,
            Some(ds) => {
                let df = self.ctx.map.linear_part(grid, h)?;
                let du = ds.solve(&df, self.ctx.tol)?;
                2.0 * self.ctx.objective.alpha * self.ctx.p.space().v_inner(&self.mismatch, du.values.last().unwrap())
            }
        };
        Ok(reg + track)
    }

    /// One-sided derivatives along `+e` and `−e` for every coordinate; `+∞` marks infeasible probes.
    fn probes(&self) -> Result<Vec<(f64, f64)>, SolverError> {
        let nodes = self.g.samples.len();
        let dim = self.g.dim();
        let linear = self.is_linear();
        let coords: Vec<(usize, usize)> = (0..nodes).flat_map(|n| (0..dim).map(move |j| (n, j))).collect();
        coords
            .par_iter()
            .map(|&(n, j)| {
                let (lo, hi) = self.g.bound(j);
                let x = self.g.samples[n][j];
                let up_ok = hi.is_none_or(|h| x < h);
                let down_ok = lo.is_none_or(|l| x > l);
                let unit = |s: f64| {
                    let mut h = vec![Vector::zeros(dim); nodes];
                    h[n][j] = s;
                    h
                };
                let plus = if up_ok || linear { self.derivative(&unit(1.0))? } else { f64::INFINITY };
                let minus = if linear {
                    -plus
                } else if down_ok {
                    self.derivative(&unit(-1.0))?
                } else {
                    f64::INFINITY
                };
                Ok((if up_ok { plus } else { f64::INFINITY }, if down_ok { minus } else { f64::INFINITY }))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinimizeOptions {
    /// Stationarity threshold on the probe derivatives.
    pub tol: f64,
    /// Tolerance of the forward and derivative solves.
    pub solve_tol: f64,
    pub max_iters: usize,
    pub armijo_fraction: f64,
    pub backtrack: f64,
    pub max_halvings: usize,
    pub thresholds: Thresholds,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            solve_tol: 1e-10,
            max_iters: 50,
            armijo_fraction: 1e-4,
            backtrack: 0.5,
            max_halvings: 60,
            thresholds: Thresholds::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinimizeResult {
    pub control: Control,
    /// Cost of the initial control followed by every accepted iterate.
    pub history: Vec<CostReport>,
    /// Accepted step lengths (the first entry, for the initial control, is 0).
    pub steps: Vec<f64>,
    pub iterations: usize,
    /// Smallest probe derivative at the returned control.
    pub best_probe: f64,
    /// False when `max_iters` was reached before stationarity.
    pub converged: bool,
}

/// Projected descent with Armijo backtracking, started at `g0`.
pub fn minimize(
    p: &HdviProblem,
    map: &ControlMap,
    g0: &Control,
    objective: &Objective,
    options: &MinimizeOptions,
) -> Result<MinimizeResult, SolverError> {
    if !g0.is_feasible() {
        return Err(SolverError::InvalidArgument("initial control violates its bounds".into()));
    }
    let ctx = CostContext::new(p, map, objective, options.solve_tol)?;
    let mut g = g0.clone();
    let mut current = ctx.evaluate(&g)?;
    let mut history = vec![current.report];
    let mut steps = vec![0.0];
    let mut previous: Option<(Control, Vec<Vector>)> = None;
    for iteration in 0..=options.max_iters {
        let lin = Linearization::new(&ctx, &g, &current, &options.thresholds)?;
        let probes = lin.probes()?;
        let best_probe = probes.iter().map(|(a, b)| a.min(*b)).fold(f64::INFINITY, f64::min);
        if best_probe >= -options.tol || iteration == options.max_iters {
            return Ok(MinimizeResult {
                control: g,
                history,
                steps,
                iterations: iteration,
                best_probe,
                converged: best_probe >= -options.tol,
            });
        }
        let dim = g.dim();
        let direction: Vec<Vector> = g
            .samples
            .iter()
            .enumerate()
            .map(|(n, _)| {
                Vector::from_iterator(
                    dim,
                    (0..dim).map(|j| {
                        let (plus, minus) = probes[n * dim + j];
                        if plus < 0.0 && plus <= minus {
                            -plus
                        } else if minus < 0.0 {
                            minus
                        } else {
                            0.0
                        }
                    }),
                )
            })
            .collect();
        // Barzilai–Borwein length from the last accepted step
        let mut s = match &previous {
            Some((g_prev, d_prev)) => {
                let mut ss = 0.0;
                let mut sy = 0.0;
                for n in 0..g.samples.len() {
                    let dg = &g.samples[n] - &g_prev.samples[n];
                    let dy = &d_prev[n] - &direction[n];
                    ss += dg.dot(&dg);
                    sy += dg.dot(&dy);
                }
                if sy > 0.0 {
                    (ss / sy).clamp(1e-10, 1e10)
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let mut accepted = None;
        for _ in 0..=options.max_halvings {
            let trial = g.step(s, &direction);
            // model decrease from the one-sided coordinate derivatives
            let mut predicted = 0.0;
            for n in 0..g.samples.len() {
                for j in 0..dim {
                    let delta = trial.samples[n][j] - g.samples[n][j];
                    let (plus, minus) = probes[n * dim + j];
                    if delta > 0.0 {
                        predicted += plus * delta;
                    } else if delta < 0.0 {
                        predicted += minus * -delta;
                    }
                }
            }
            if predicted < 0.0 {
                let eval = ctx.evaluate(&trial)?;
                if eval.report.total <= current.report.total + options.armijo_fraction * predicted
                    && eval.report.total < current.report.total
                {
                    accepted = Some((trial, eval));
                    break;
                }
            }
            s *= options.backtrack;
        }
        let Some((trial, eval)) = accepted else {
            return Err(SolverError::LineSearchFailed { iteration, halvings: options.max_halvings });
        };
        previous = Some((g, direction));
        g = trial;
        current = eval;
        history.push(current.report);
        steps.push(s);
    }
    unreachable!("the loop returns at max_iters")
}

/// Smallest finite-difference slope of the cost along the given directions.
pub fn fd_slopes(
    p: &HdviProblem,
    map: &ControlMap,
    g: &Control,
    objective: &Objective,
    directions: &[Vec<Vector>],
    step: f64,
    tol: f64,
) -> Result<Vec<f64>, SolverError> {
    let ctx = CostContext::new(p, map, objective, tol)?;
    let base = ctx.evaluate(g)?.report.total;
    directions
        .par_iter()
        .map(|h| {
            let trial = g.step(step, h);
            Ok((ctx.evaluate(&trial)?.report.total - base) / step)
        })
        .collect()
}
