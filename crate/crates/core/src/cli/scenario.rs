//! Scenario document schema and its validation into a ready-to-run plan.

use serde::Deserialize;

use super::CliError;
use crate::algebra::{DenseMatrix, Quadrature, TimeGrid, Vector};
use crate::control::{rod_body_and_traction_map, rod_traction_map, Control, ControlMap, Objective, MapKind};
use crate::evi::Thresholds;
use crate::hdvi::solve_forward;
use crate::model::{
    build_rod_example, rod_contact_dof, ComplianceFunction, ComplianceLaw, ConstraintSet, Contact, DiscreteSpace,
    HdviProblem, KernelKind, LoadHistory, ProblemOptions, RelaxationKernel,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Forward,
    Picard,
    Sensitivity,
    Control,
    Wellposed,
    RodRegression,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Forward => "forward",
            Mode::Picard => "picard",
            Mode::Sensitivity => "sensitivity",
            Mode::Control => "control",
            Mode::Wellposed => "wellposed",
            Mode::RodRegression => "rod_regression",
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub description: Option<String>,
    pub mode: Mode,
    pub problem: ProblemSpec,
    pub time: TimeSpec,
    #[serde(default)]
    pub numerics: NumericsSpec,
    #[serde(default)]
    pub picard: Option<PicardSpec>,
    #[serde(default)]
    pub sensitivity: Option<SensitivitySpec>,
    #[serde(default)]
    pub control: Option<ControlSpec>,
    #[serde(default)]
    pub wellposed: Option<WellposedSpec>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemSpec {
    Rod { n_elements: usize },
    Explicit(ExplicitProblem),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplicitProblem {
    pub strain_map: Vec<Vec<f64>>,
    pub q_weights: Vec<f64>,
    pub stiffness: Vec<Vec<f64>>,
    #[serde(default)]
    pub constraints: Vec<BoundSpec>,
    #[serde(default)]
    pub compliance: Option<ComplianceSpec>,
    #[serde(default)]
    pub kernel: Option<KernelSpec>,
    pub load: TableSpec,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundSpec {
    pub dof: usize,
    pub upper: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComplianceSpec {
    pub function: ComplianceFunctionSpec,
    pub contacts: Vec<ContactSpec>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ComplianceFunctionSpec {
    Linear { stiffness: f64 },
    PiecewiseLinear { breakpoints: Vec<f64>, slopes: Vec<f64> },
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContactSpec {
    pub dof: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelSpec {
    Constant { matrix: Vec<Vec<f64>> },
    Exponential { matrix: Vec<Vec<f64>>, rate_per_second: f64 },
    Table {
        times_seconds: Vec<f64>,
        matrices: Vec<Vec<Vec<f64>>>,
        #[serde(default)]
        modulus: Option<f64>,
    },
}

/// Piecewise-linear table in time, held constant outside its range.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableSpec {
    pub times_seconds: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSpec {
    pub t_end_seconds: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NumericsSpec {
    pub tol: f64,
    pub quadrature: Quadrature,
    pub safety_factor: f64,
    pub thresholds: Thresholds,
}

impl Default for NumericsSpec {
    fn default() -> Self {
        Self { tol: 1e-10, quadrature: Quadrature::Trapezoid, safety_factor: 1.0, thresholds: Thresholds::default() }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PicardSpec {
    pub max_sweeps: usize,
}

impl Default for PicardSpec {
    fn default() -> Self {
        Self { max_sweeps: 200 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DirectionSpec {
    /// `δf = f`.
    Load,
    Table(TableSpec),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensitivitySpec {
    pub direction: DirectionSpec,
    #[serde(default = "default_taus")]
    pub taus: Vec<f64>,
    #[serde(default = "default_exponent")]
    pub exponent: f64,
    #[serde(default = "default_true")]
    pub hadamard: bool,
}

fn default_taus() -> Vec<f64> {
    vec![1e-1, 1e-2, 1e-3, 1e-4]
}

fn default_exponent() -> f64 {
    2.0
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum MapSpec {
    /// Rod only: traction at `x = 1`, optionally on top of the problem load.
    TractionOnly {
        #[serde(default = "default_true")]
        include_problem_load: bool,
    },
    /// Rod only: body force and traction, no fixed load.
    BodyAndTraction,
    Explicit {
        assembly: Vec<Vec<f64>>,
        z_weights: Vec<f64>,
        #[serde(default = "default_true")]
        include_problem_load: bool,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetSpec {
    /// Final state given directly.
    State(Vec<f64>),
    /// Final state reached by the constant control with these components.
    FromControl(Vec<f64>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSpec {
    pub map: MapSpec,
    pub alpha: f64,
    pub beta: f64,
    pub target: TargetSpec,
    /// Constant initial control.
    pub initial: Vec<f64>,
    /// `[lower, upper]` per component; `null` for an open side.
    #[serde(default)]
    pub bounds: Option<Vec<[Option<f64>; 2]>>,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_stationarity")]
    pub stationarity_tol: f64,
}

fn default_max_iters() -> usize {
    50
}

fn default_stationarity() -> f64 {
    1e-6
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SequenceSpec {
    /// Rod only: `x·e^{-t} + 1/k`.
    Ex6 { ks: Vec<usize> },
    /// Solutions for `f + (1/k)·ω̂`; the direction defaults to the rod contact dof.
    PApproximating {
        ks: Vec<usize>,
        #[serde(default)]
        direction: Option<Vec<f64>>,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WellposedSpec {
    pub sequence: SequenceSpec,
}

/// Command-line values that replace the document's.
#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize)]
pub struct Overrides {
    pub tol: Option<f64>,
    pub steps: Option<usize>,
}

/// Validated inputs of one mode.
pub enum ModePlan {
    Forward,
    Picard { max_sweeps: usize },
    Sensitivity { delta_f: LoadHistory, taus: Vec<f64>, exponent: f64, hadamard: bool },
    Control { map: ControlMap, cost: Objective, initial: Control, max_iters: usize, stationarity_tol: f64 },
    Wellposed { sequence: SequencePlan },
    RodRegression { n_elements: usize },
}

pub enum SequencePlan {
    Ex6 { n_elements: usize, ks: Vec<usize> },
    PApproximating { ks: Vec<usize>, direction: Vector },
}

pub struct Plan {
    pub mode: Mode,
    pub problem: HdviProblem,
    pub tol: f64,
    pub thresholds: Thresholds,
    pub rod_elements: Option<usize>,
    pub payload: ModePlan,
}

pub fn parse(text: &str) -> Result<Scenario, CliError> {
    serde_json::from_str(text).map_err(|e| CliError::Parse { message: e.to_string(), line: e.line(), column: e.column() })
}

fn invalid(field: &str, message: impl Into<String>) -> CliError {
    CliError::Validation { field: field.to_string(), message: message.into() }
}

fn matrix(field: &str, rows: &[Vec<f64>]) -> Result<DenseMatrix, CliError> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if n == 0 || m == 0 {
        return Err(invalid(field, "matrix is empty"));
    }
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != m) {
        return Err(invalid(field, format!("row {i} has {} entries, expected {m}", r.len())));
    }
    Ok(DenseMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

fn square(field: &str, rows: &[Vec<f64>], dim: usize) -> Result<DenseMatrix, CliError> {
    let a = matrix(field, rows)?;
    if a.nrows() != a.ncols() {
        return Err(invalid(field, format!("matrix is {}x{}, expected square", a.nrows(), a.ncols())));
    }
    if a.nrows() != dim {
        return Err(invalid(field, format!("matrix is {0}x{0}, expected {dim}x{dim}", a.nrows())));
    }
    Ok(a)
}

fn vector(field: &str, v: &[f64], dim: usize) -> Result<Vector, CliError> {
    if v.len() != dim {
        return Err(invalid(field, format!("has {} entries, expected {dim}", v.len())));
    }
    Ok(Vector::from_column_slice(v))
}

fn table(field: &str, objective: &TableSpec, grid: TimeGrid, dim: usize) -> Result<LoadHistory, CliError> {
    let values = objective
        .values
        .iter()
        .enumerate()
        .map(|(i, v)| vector(&format!("{field}.values[{i}]"), v, dim))
        .collect::<Result<Vec<_>, _>>()?;
    LoadHistory::from_table(grid, &objective.times_seconds, &values).map_err(|e| invalid(field, e.to_string()))
}

fn explicit_problem(e: &ExplicitProblem, grid: TimeGrid, options: ProblemOptions) -> Result<HdviProblem, CliError> {
    const F: &str = "problem.explicit";
    let d = matrix(&format!("{F}.strain_map"), &e.strain_map)?;
    let nq = d.nrows();
    let n = d.ncols();
    let w = vector(&format!("{F}.q_weights"), &e.q_weights, nq)?;
    let space = DiscreteSpace::new(d, w).map_err(|err| invalid(&format!("{F}.strain_map"), err.to_string()))?;
    let stiffness = square(&format!("{F}.stiffness"), &e.stiffness, nq)?;
    let kernel = match &e.kernel {
        None => RelaxationKernel::zero(nq),
        Some(KernelSpec::Constant { matrix }) => {
            RelaxationKernel::constant(square(&format!("{F}.kernel.constant.matrix"), matrix, nq)?)
                .map_err(|err| invalid(&format!("{F}.kernel"), err.to_string()))?
        }
        Some(KernelSpec::Exponential { matrix, rate_per_second }) => {
            let m = square(&format!("{F}.kernel.exponential.matrix"), matrix, nq)?;
            RelaxationKernel::new(KernelKind::Exponential { matrix: m, rate: *rate_per_second }, None)
                .map_err(|err| invalid(&format!("{F}.kernel"), err.to_string()))?
        }
        Some(KernelSpec::Table { times_seconds, matrices, modulus }) => {
            let ms = matrices
                .iter()
                .enumerate()
                .map(|(i, m)| square(&format!("{F}.kernel.table.matrices[{i}]"), m, nq))
                .collect::<Result<Vec<_>, _>>()?;
            RelaxationKernel::new(KernelKind::Table { times: times_seconds.clone(), matrices: ms }, *modulus)
                .map_err(|err| invalid(&format!("{F}.kernel"), err.to_string()))?
        }
    };
    let compliance = match &e.compliance {
        None => ComplianceLaw::none(),
        Some(c) => {
            let function = match &c.function {
                ComplianceFunctionSpec::Linear { stiffness } => ComplianceFunction::Linear { stiffness: *stiffness },
                ComplianceFunctionSpec::PiecewiseLinear { breakpoints, slopes } => {
                    ComplianceFunction::PiecewiseLinear { breakpoints: breakpoints.clone(), slopes: slopes.clone() }
                }
            };
            let contacts = c.contacts.iter().map(|c| Contact { dof: c.dof, weight: c.weight }).collect();
            ComplianceLaw::new(n, function, contacts).map_err(|err| invalid(&format!("{F}.compliance"), err.to_string()))?
        }
    };
    let constraints = ConstraintSet::new(n, e.constraints.iter().map(|b| (b.dof, b.upper)).collect())
        .map_err(|err| invalid(&format!("{F}.constraints"), err.to_string()))?;
    let load = table(&format!("{F}.load"), &e.load, grid, n)?;
    HdviProblem::new(space, stiffness, kernel, compliance, constraints, load, grid, options)
        .map_err(|err| invalid("problem", err.to_string()))
}

fn rod_problem(n_elements: usize, grid: TimeGrid, options: ProblemOptions) -> Result<HdviProblem, CliError> {
    let field = "problem.rod.n_elements";
    let p = build_rod_example(n_elements, grid).map_err(|e| invalid(field, e.to_string()))?;
    if options == p.options() {
        return Ok(p);
    }
    HdviProblem::new(
        p.space().clone(),
        p.stiffness().clone(),
        p.kernel().clone(),
        p.compliance().clone(),
        p.constraints().clone(),
        p.load().clone(),
        grid,
        options,
    )
    .map_err(|e| invalid("numerics", e.to_string()))
}

fn check_ks(field: &str, ks: &[usize]) -> Result<(), CliError> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(invalid(field, "needs at least one member and every k ≥ 1"));
    }
    Ok(())
}

/// Validates every field and builds the problem and mode inputs; no solve beyond a target state.
pub fn prepare(s: &Scenario, overrides: &Overrides) -> Result<Plan, CliError> {
    let steps = overrides.steps.unwrap_or(s.time.steps);
    let tol = overrides.tol.unwrap_or(s.numerics.tol);
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(invalid("numerics.tol", format!("must be positive, got {tol}")));
    }
    let grid = TimeGrid::new(s.time.t_end_seconds, steps).map_err(|e| invalid("time", e.to_string()))?;
    if !(s.numerics.safety_factor >= 1.0 && s.numerics.safety_factor.is_finite()) {
        return Err(invalid("numerics.safety_factor", "must be ≥ 1"));
    }
    let th = s.numerics.thresholds;
    if !(th.act > 0.0 && th.mult > 0.0 && th.act.is_finite() && th.mult.is_finite()) {
        return Err(invalid("numerics.thresholds", "act and mult must be positive"));
    }
    let options = ProblemOptions { quadrature: s.numerics.quadrature, safety_factor: s.numerics.safety_factor };
    let (problem, rod_elements) = match &s.problem {
        ProblemSpec::Rod { n_elements } => (rod_problem(*n_elements, grid, options)?, Some(*n_elements)),
        ProblemSpec::Explicit(e) => (explicit_problem(e, grid, options)?, None),
    };
    let n = problem.n_dof();
    let payload = match s.mode {
        Mode::Forward => ModePlan::Forward,
        Mode::Picard => ModePlan::Picard { max_sweeps: s.picard.unwrap_or_default().max_sweeps },
        Mode::RodRegression => {
            let n_elements = rod_elements.ok_or_else(|| invalid("problem", "rod_regression needs the rod problem"))?;
            ModePlan::RodRegression { n_elements }
        }
        Mode::Sensitivity => {
            let objective = s.sensitivity.as_ref().ok_or_else(|| invalid("sensitivity", "block is required"))?;
            let delta_f = match &objective.direction {
                DirectionSpec::Load => problem.load().clone(),
                DirectionSpec::Table(t) => table("sensitivity.direction.table", t, grid, n)?,
            };
            if objective.taus.is_empty() || objective.taus.iter().any(|t| !(*t > 0.0)) || objective.taus.windows(2).any(|w| w[1] >= w[0]) {
                return Err(invalid("sensitivity.taus", "must be positive and strictly decreasing"));
            }
            if !(objective.exponent > 1.0 && objective.exponent.is_finite()) {
                return Err(invalid("sensitivity.exponent", "must lie in (1, ∞)"));
            }
            ModePlan::Sensitivity { delta_f, taus: objective.taus.clone(), exponent: objective.exponent, hadamard: objective.hadamard }
        }
        Mode::Control => {
            let objective = s.control.as_ref().ok_or_else(|| invalid("control", "block is required"))?;
            let map = match &objective.map {
                MapSpec::TractionOnly { include_problem_load } => {
                    let ne = rod_elements.ok_or_else(|| invalid("control.map", "traction_only needs the rod problem"))?;
                    let fixed =
                        if *include_problem_load { problem.load().clone() } else { problem.load().scaled(0.0) };
                    rod_traction_map(ne, fixed).map_err(|e| invalid("control.map", e.to_string()))?
                }
                MapSpec::BodyAndTraction => {
                    let ne = rod_elements.ok_or_else(|| invalid("control.map", "body_and_traction needs the rod problem"))?;
                    rod_body_and_traction_map(ne).map_err(|e| invalid("control.map", e.to_string()))?
                }
                MapSpec::Explicit { assembly, z_weights, include_problem_load } => {
                    let a = matrix("control.map.explicit.assembly", assembly)?;
                    if a.nrows() != n {
                        return Err(invalid("control.map.explicit.assembly", format!("has {} rows, expected {n}", a.nrows())));
                    }
                    let w = vector("control.map.explicit.z_weights", z_weights, a.ncols())?;
                    let kind = if *include_problem_load {
                        MapKind::TractionOnly { fixed: problem.load().clone() }
                    } else {
                        MapKind::BodyAndTraction
                    };
                    ControlMap::new(kind, a, w).map_err(|e| invalid("control.map", e.to_string()))?
                }
            };
            let nz = map.assembly.ncols();
            let bounds = objective.bounds.as_ref().map(|b| b.iter().map(|[lo, hi]| (*lo, *hi)).collect::<Vec<_>>());
            let initial = Control::constant(&grid, vector("control.initial", &objective.initial, nz)?, bounds)
                .map_err(|e| invalid("control.bounds", e.to_string()))?;
            if !initial.is_feasible() {
                return Err(invalid("control.initial", "violates control.bounds"));
            }
            let target = match &objective.target {
                TargetSpec::State(v) => vector("control.target.state", v, n)?,
                TargetSpec::FromControl(g) => {
                    let g = Control::constant(&grid, vector("control.target.from_control", g, nz)?, None)
                        .map_err(|e| invalid("control.target", e.to_string()))?;
                    let load = crate::control::control_to_load(&g, &map, &grid)
                        .map_err(|e| invalid("control.target", e.to_string()))?;
                    let p = problem.with_load(load).map_err(|e| invalid("control.target", e.to_string()))?;
                    solve_forward(&p, tol)?.last().clone()
                }
            };
            let cost = Objective::new(objective.alpha, objective.beta, target).map_err(|e| invalid("control", e.to_string()))?;
            if !(objective.stationarity_tol > 0.0) {
                return Err(invalid("control.stationarity_tol", "must be positive"));
            }
            ModePlan::Control {
                map,
                cost,
                initial,
                max_iters: objective.max_iters,
                stationarity_tol: objective.stationarity_tol,
            }
        }
        Mode::Wellposed => {
            let objective = s.wellposed.as_ref().ok_or_else(|| invalid("wellposed", "block is required"))?;
            let sequence = match &objective.sequence {
                SequenceSpec::Ex6 { ks } => {
                    check_ks("wellposed.sequence.ex6.ks", ks)?;
                    let n_elements =
                        rod_elements.ok_or_else(|| invalid("wellposed.sequence", "ex6 needs the rod problem"))?;
                    SequencePlan::Ex6 { n_elements, ks: ks.clone() }
                }
                SequenceSpec::PApproximating { ks, direction } => {
                    check_ks("wellposed.sequence.p_approximating.ks", ks)?;
                    let direction = match (direction, rod_elements) {
                        (Some(d), _) => vector("wellposed.sequence.p_approximating.direction", d, n)?,
                        (None, Some(ne)) => {
                            let mut d = Vector::zeros(n);
                            d[rod_contact_dof(ne)] = 1.0;
                            d
                        }
                        (None, None) => {
                            return Err(invalid("wellposed.sequence.p_approximating.direction", "required for explicit problems"))
                        }
                    };
                    if direction.iter().all(|x| *x == 0.0) {
                        return Err(invalid("wellposed.sequence.p_approximating.direction", "must be nonzero"));
                    }
                    SequencePlan::PApproximating { ks: ks.clone(), direction }
                }
            };
            ModePlan::Wellposed { sequence }
        }
    };
    Ok(Plan { mode: s.mode, problem, tol, thresholds: th, rod_elements, payload })
}
