//! Mode execution and artifact emission.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use super::scenario::{parse, prepare, ModePlan, Overrides, Plan, SequencePlan};
use super::CliError;
use crate::control::{minimize, MinimizeOptions};
use crate::hdvi::{solve_forward, solve_picard, step_contraction_factor, Trajectory};
use crate::model::{build_rod_example, derived_constants, rod_nodes, DerivedConstants, HdviProblem};
use crate::sensitivity::{fd_validate_with, hadamard_probe_with};
use crate::wellposed::{ex6_sequence, p_approximating_sequence, verify_t4_bound_with};

/// Summary written next to the CSV outputs.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub status: &'static str,
    pub mode: &'static str,
    pub scenario: String,
    pub scenario_sha256: String,
    pub overrides: Overrides,
    pub threads: usize,
    pub constants: DerivedConstants,
    pub step_contraction_factor: f64,
    pub metrics: Map<String, Value>,
    pub files: Vec<String>,
    pub wall_time_seconds: f64,
}

/// CSV text with a fixed number format and `\n` line endings.
struct Csv {
    text: String,
}

impl Csv {
    fn new(header: &[String]) -> Self {
        Self { text: format!("{}\n", header.join(",")) }
    }

    fn row(&mut self, cells: &[String]) {
        let _ = writeln!(self.text, "{}", cells.join(","));
    }
}

pub(crate) fn num(x: f64) -> String {
    format!("{x:.16e}")
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, num)
}

fn header(first: &str, prefix: &str, n: usize) -> Vec<String> {
    std::iter::once(first.to_string()).chain((0..n).map(|i| format!("{prefix}_{i}"))).collect()
}

fn trajectory_csv(u: &Trajectory, prefix: &str) -> Csv {
    let n = u.values.first().map_or(0, |v| v.len());
    let mut csv = Csv::new(&header("t", prefix, n));
    for (k, v) in u.values.iter().enumerate() {
        let mut cells = vec![num(u.grid.node(k))];
        cells.extend(v.iter().map(|x| num(*x)));
        csv.row(&cells);
    }
    csv
}

fn rod_errors(u: &Trajectory, n_elements: usize) -> Vec<f64> {
    let x = rod_nodes(n_elements);
    u.values
        .iter()
        .enumerate()
        .map(|(k, v)| {
            let decay = (-u.grid.node(k)).exp();
            v.iter().zip(&x).map(|(ui, xi)| (ui - xi * decay).abs()).fold(0.0, f64::max)
        })
        .collect()
}

struct Outputs {
    files: Vec<(String, Csv)>,
    metrics: Map<String, Value>,
}

impl Outputs {
    fn new() -> Self {
        Self { files: Vec::new(), metrics: Map::new() }
    }

    fn file(&mut self, name: &str, csv: Csv) {
        self.files.push((name.to_string(), csv));
    }

    fn metric(&mut self, name: &str, value: Value) {
        self.metrics.insert(name.to_string(), value);
    }
}

fn execute(plan: &Plan) -> Result<Outputs, CliError> {
    let p = &plan.problem;
    let tol = plan.tol;
    let mut out = Outputs::new();
    match &plan.payload {
        ModePlan::Forward => {
            let u = solve_forward(p, tol)?;
            let mut nodes = Csv::new(&["node", "t", "vi_residual", "inner_iterations", "evi_iterations"].map(String::from));
            for (k, m) in u.meta.iter().enumerate() {
                nodes.row(&[
                    k.to_string(),
                    num(u.grid.node(k)),
                    num(m.vi_residual),
                    m.inner_iterations.to_string(),
                    m.evi_iterations.to_string(),
                ]);
            }
            out.metric("max_vi_residual", json!(u.meta.iter().map(|m| m.vi_residual).fold(0.0, f64::max)));
            out.metric("c_norm", json!(u.c_norm(p.space())));
            out.metric("evi_iterations", json!(u.meta.iter().map(|m| m.evi_iterations).sum::<usize>()));
            out.file("trajectory.csv", trajectory_csv(&u, "u"));
            out.file("nodes.csv", nodes);
        }
        ModePlan::Picard { max_sweeps } => {
            let zero = Trajectory::zeros(*p.grid(), p.n_dof());
            let res = solve_picard(p, &zero, tol, *max_sweeps)?;
            let forward = solve_forward(p, tol)?;
            let mut sweeps = Csv::new(&["sweep", "change"].map(String::from));
            for (k, c) in res.changes.iter().enumerate() {
                sweeps.row(&[(k + 1).to_string(), num(*c)]);
            }
            out.metric("sweeps", json!(res.sweeps));
            out.metric("final_change", json!(res.changes.last().copied().unwrap_or(0.0)));
            out.metric("max_abs_difference_to_forward", json!(res.trajectory.max_abs_difference(&forward)));
            out.file("trajectory.csv", trajectory_csv(&res.trajectory, "u"));
            out.file("sweeps.csv", sweeps);
        }
        ModePlan::Sensitivity { delta_f, taus, exponent, hadamard } => {
            let fd = fd_validate_with(p, delta_f, taus, *exponent, tol, &plan.thresholds)?;
            let mut fd_csv = Csv::new(&["tau", "error"].map(String::from));
            for (t, e) in taus.iter().zip(&fd.errors) {
                fd_csv.row(&[num(*t), num(*e)]);
            }
            let mut cones = Csv::new(&["node", "dof", "tag"].map(String::from));
            for (k, cone) in fd.derivative.cones.iter().enumerate() {
                for &(dof, _) in p.constraints().bounded() {
                    cones.row(&[k.to_string(), dof.to_string(), cone.tag(dof).as_str().to_string()]);
                }
            }
            let noise = 10.0 * tol;
            out.metric("fd_errors", json!(fd.errors));
            out.metric("fd_final_error", json!(fd.errors.last()));
            out.metric("fd_nonincreasing", json!(fd.is_nonincreasing(noise)));
            out.metric("ambiguous_nodes", json!(fd.derivative.ambiguous_nodes().len()));
            out.file("derivative.csv", trajectory_csv(&Trajectory::new(fd.derivative.grid, fd.derivative.values.clone())?, "du"));
            out.file("fd.csv", fd_csv);
            out.file("cones.csv", cones);
            if *hadamard {
                let perturbations: Vec<_> = taus.iter().map(|t| delta_f.scaled(1.0 + t)).collect();
                let h = hadamard_probe_with(p, delta_f, &perturbations, taus, *exponent, tol, &plan.thresholds)?;
                let mut csv = Csv::new(&["tau", "diagonal_error", "fd_error", "direction_gap"].map(String::from));
                for k in 0..taus.len() {
                    csv.row(&[num(taus[k]), num(h.diagonal_errors[k]), num(h.fd_errors[k]), num(h.direction_gaps[k])]);
                }
                let floor = noise.max(fd.errors[0] / 10.0);
                out.metric("hadamard_diagonal_errors", json!(h.diagonal_errors));
                out.metric("hadamard_within_factor_2", json!(h.within_factor(2.0, floor)));
                out.file("hadamard.csv", csv);
            }
        }
        ModePlan::Control { map, cost, initial, max_iters, stationarity_tol } => {
            let options = MinimizeOptions {
                tol: *stationarity_tol,
                solve_tol: tol,
                max_iters: *max_iters,
                thresholds: plan.thresholds,
                ..Default::default()
            };
            let res = minimize(p, map, initial, cost, &options)?;
            let mut control = Csv::new(&header("t", "g", res.control.dim()));
            for (k, g) in res.control.samples.iter().enumerate() {
                let mut cells = vec![num(p.grid().node(k))];
                cells.extend(g.iter().map(|x| num(*x)));
                control.row(&cells);
            }
            let mut history = Csv::new(&["iteration", "tracking", "regularization", "total", "step"].map(String::from));
            for (k, (c, s)) in res.history.iter().zip(&res.steps).enumerate() {
                history.row(&[k.to_string(), num(c.tracking), num(c.regularization), num(c.total), num(*s)]);
            }
            let first = res.history.first().map_or(0.0, |c| c.total);
            let last = res.history.last().map_or(0.0, |c| c.total);
            out.metric("initial_cost", json!(first));
            out.metric("final_cost", json!(last));
            out.metric("cost_ratio", json!(if first > 0.0 { last / first } else { 0.0 }));
            out.metric("iterations", json!(res.iterations));
            out.metric("converged", json!(res.converged));
            out.metric("best_probe_derivative", json!(res.best_probe));
            out.metric(
                "history_strictly_decreasing",
                json!(res.history.windows(2).all(|w| w[1].total < w[0].total)),
            );
            out.file("control.csv", control);
            out.file("history.csv", history);
        }
        ModePlan::Wellposed { sequence } => {
            let (ks, members) = match sequence {
                SequencePlan::Ex6 { n_elements, ks } => (ks.clone(), ex6_sequence(p, *n_elements, ks)?),
                SequencePlan::PApproximating { ks, direction } => {
                    let eps: Vec<f64> = ks.iter().map(|&k| 1.0 / k as f64).collect();
                    (ks.clone(), p_approximating_sequence(p, direction, &eps, tol)?)
                }
            };
            let diag = verify_t4_bound_with(p, &members, tol, &plan.thresholds)?;
            let mut csv = Csv::new(
                &["member", "k", "feasible", "p_residual", "q_residual", "distance", "p_bound", "q_bound", "pass"]
                    .map(String::from),
            );
            for (i, (m, k)) in diag.members.iter().zip(&ks).enumerate() {
                let pass = m.p_bound.is_none_or(|b| m.v_distance_to_solution <= b) && m.v_distance_to_solution <= m.q_bound;
                csv.row(&[
                    i.to_string(),
                    k.to_string(),
                    m.feasible.to_string(),
                    opt(m.p_residual),
                    num(m.q_residual),
                    num(m.v_distance_to_solution),
                    opt(m.p_bound),
                    num(m.q_bound),
                    if pass { "pass" } else { "fail" }.to_string(),
                ]);
            }
            let p_status = if diag.all_infeasible() {
                "infeasible"
            } else if diag.any_feasible() && diag.members.iter().all(|m| m.feasible) {
                "feasible"
            } else {
                "mixed"
            };
            out.metric("p_status", json!(p_status));
            out.metric("q_convergent", json!(diag.q_tail_decreasing(diag.members.len())));
            out.metric("q_residuals", json!(diag.members.iter().map(|m| m.q_residual).collect::<Vec<_>>()));
            out.metric("distances", json!(diag.members.iter().map(|m| m.v_distance_to_solution).collect::<Vec<_>>()));
            out.metric("bound_K", json!(diag.bound));
            out.metric("gronwall_factor", json!(diag.gronwall_factor));
            out.file("diagnostic.csv", csv);
        }
        ModePlan::RodRegression { n_elements } => {
            let u = solve_forward(p, tol)?;
            let errors = rod_errors(&u, *n_elements);
            let refined_grid = crate::algebra::TimeGrid::new(p.grid().t_end(), 2 * p.grid().steps())?;
            let refined = build_rod_example(*n_elements, refined_grid)?.with_quadrature(p.quadrature());
            let refined_error = rod_errors(&solve_forward(&refined, tol)?, *n_elements).into_iter().fold(0.0, f64::max);
            let sup = errors.iter().copied().fold(0.0, f64::max);
            let mut csv = Csv::new(&["t", "max_abs_error"].map(String::from));
            for (k, e) in errors.iter().enumerate() {
                csv.row(&[num(u.grid.node(k)), num(*e)]);
            }
            out.metric("sup_error", json!(sup));
            out.metric("sup_error_refined", json!(refined_error));
            out.metric("refinement_ratio", json!(sup / refined_error));
            out.metric("within_1e-3", json!(sup <= 1e-3));
            out.file("trajectory.csv", trajectory_csv(&u, "u"));
            out.file("errors.csv", csv);
        }
    }
    Ok(out)
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io { path: path.display().to_string(), message: e.to_string() }
}

/// Parses, validates and builds the plan of a scenario file.
pub fn load(path: &Path, overrides: &Overrides) -> Result<(Plan, String), CliError> {
    let bytes = fs::read(path).map_err(|e| io_error(path, e))?;
    let text = String::from_utf8(bytes.clone())
        .map_err(|e| CliError::Parse { message: e.to_string(), line: 0, column: 0 })?;
    let scenario = parse(&text)?;
    let plan = prepare(&scenario, overrides)?;
    Ok((plan, hex::encode(Sha256::digest(&bytes))))
}

/// Runs one scenario and writes its CSV files and `manifest.json` into `out_dir`.
pub fn run(path: &Path, out_dir: &Path, overrides: &Overrides, threads: usize) -> Result<RunManifest, CliError> {
    let start = Instant::now();
    let (plan, hash) = load(path, overrides)?;
    let outputs = execute(&plan)?;
    fs::create_dir_all(out_dir).map_err(|e| io_error(out_dir, e))?;
    let mut files = Vec::new();
    for (name, csv) in &outputs.files {
        let target = out_dir.join(name);
        fs::write(&target, &csv.text).map_err(|e| io_error(&target, e))?;
        files.push(name.clone());
    }
    let manifest = RunManifest {
        status: "ok",
        mode: plan.mode.as_str(),
        scenario: path.display().to_string(),
        scenario_sha256: hash,
        overrides: *overrides,
        threads,
        constants: derived_constants(&plan.problem),
        step_contraction_factor: step_contraction_factor(&plan.problem),
        metrics: outputs.metrics,
        files,
        wall_time_seconds: start.elapsed().as_secs_f64(),
    };
    write_json(&out_dir.join("manifest.json"), &serde_json::to_value(&manifest).expect("manifest serializes"))?;
    Ok(manifest)
}

pub(crate) fn write_json(path: &Path, value: &Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("json value serializes") + "\n";
    fs::write(path, text).map_err(|e| io_error(path, e))
}

/// Constants of a validated scenario, with the step contraction factor.
pub fn constants(plan: &Plan) -> Value {
    let problem: &HdviProblem = &plan.problem;
    json!({
        "constants": derived_constants(problem),
        "step_contraction_factor": step_contraction_factor(problem),
        "n_dof": problem.n_dof(),
        "steps": problem.grid().steps(),
        "t_end_seconds": problem.grid().t_end(),
    })
}
