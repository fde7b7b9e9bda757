//! Acceptance criteria, one PASS/FAIL line each. Runs without the libtest
//! harness so the lines always reach stdout; exits nonzero on any failure.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use hdvi_core::algebra::{DenseMatrix, TimeGrid, Vector};
use hdvi_core::control::{control_to_load, minimize, rod_traction_map, Control, Objective, MinimizeOptions};
use hdvi_core::evi::{solve_evi, ConeTag, Thresholds};
use hdvi_core::hdvi::{equivalence_check, lipschitz_probe, solve_forward, solve_picard, Trajectory};
use hdvi_core::model::{
    build_rod_example, derived_constants, rod_contact_dof, rod_nodes, ComplianceFunction, ComplianceLaw, ConstraintSet,
    Contact, DiscreteSpace, HdviProblem, KernelKind, LoadHistory, ProblemOptions, RelaxationKernel,
};
use hdvi_core::sensitivity::{fd_validate, hadamard_probe, DerivativeSolver};
use hdvi_core::wellposed::{ex6_sequence, p_approximating_sequence, p_residual, q_residual, verify_t4_bound};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn sci(v: &[f64]) -> String {
    let items: Vec<String> = v.iter().map(|x| format!("{x:.3e}")).collect();
    format!("[{}]", items.join(", "))
}

fn rod(n: usize, steps: usize) -> HdviProblem {
    build_rod_example(n, TimeGrid::new(1.0, steps).unwrap()).unwrap()
}

fn rod_sup_error(u: &Trajectory, n: usize) -> f64 {
    let x = rod_nodes(n);
    u.values
        .iter()
        .enumerate()
        .flat_map(|(k, v)| {
            let decay = (-u.grid.node(k)).exp();
            v.iter().zip(x.clone()).map(move |(ui, xi)| (ui - xi * decay).abs()).collect::<Vec<_>>()
        })
        .fold(0.0, f64::max)
}

/// Strain map `I + strictly lower noise`, weights in `[0.5, 2]`.
fn random_space(rng: &mut ChaCha8Rng, n: usize) -> DiscreteSpace {
    let d = DenseMatrix::from_fn(n, n, |i, j| {
        if i == j {
            1.0
        } else if j < i {
            rng.gen_range(-0.4..0.4)
        } else {
            0.0
        }
    });
    let w = Vector::from_fn(n, |_, _| rng.gen_range(0.5..2.0));
    DiscreteSpace::new(d, w).unwrap()
}

/// `AᵀA + I` plus a skew part, so the symmetric part is SPD.
fn random_stiffness(rng: &mut ChaCha8Rng, n: usize, skew: f64) -> DenseMatrix {
    let a = DenseMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let s = DenseMatrix::from_fn(n, n, |_, _| rng.gen_range(-skew..=skew));
    a.transpose() * &a + DenseMatrix::identity(n, n) + (&s - s.transpose()) * 0.5
}

fn random_history_problem(rng: &mut ChaCha8Rng, n: usize, steps: usize, bounds: Vec<(usize, f64)>) -> HdviProblem {
    let grid = TimeGrid::new(1.0, steps).unwrap();
    let space = random_space(rng, n);
    let b = random_stiffness(rng, n, 0.0);
    let r = DenseMatrix::from_fn(n, n, |i, j| if i == j { rng.gen_range(0.1..0.6) } else { rng.gen_range(-0.1..0.1) });
    let kernel = RelaxationKernel::new(KernelKind::Exponential { matrix: r, rate: rng.gen_range(0.5..2.0) }, None).unwrap();
    let compliance = ComplianceLaw::new(n, ComplianceFunction::Linear { stiffness: rng.gen_range(0.5..3.0) }, vec![
        Contact { dof: 0, weight: 1.0 },
    ])
    .unwrap();
    let a = Vector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
    let c = Vector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
    let load = LoadHistory::from_fn(grid, |t| &a + &c * (3.0 * t).sin()).unwrap();
    HdviProblem::new(
        space,
        b,
        kernel,
        compliance,
        ConstraintSet::new(n, bounds).unwrap(),
        load,
        grid,
        ProblemOptions::default(),
    )
    .unwrap()
}

/// Box inequality `z ≤ g` on the listed dofs solved by enumerating active sets.
fn active_set_oracle(w: &DenseMatrix, omega: &Vector, bounds: &[(usize, f64)]) -> Vector {
    let n = w.nrows();
    for mask in 0..(1usize << bounds.len()) {
        let active: Vec<(usize, f64)> =
            bounds.iter().enumerate().filter(|(j, _)| mask >> j & 1 == 1).map(|(_, b)| *b).collect();
        let free: Vec<usize> = (0..n).filter(|i| !active.iter().any(|(d, _)| d == i)).collect();
        let mut z = Vector::zeros(n);
        for &(d, g) in &active {
            z[d] = g;
        }
        if !free.is_empty() {
            let wff = w.select_rows(&free).select_columns(&free);
            let r = omega - w * &z;
            let rhs = Vector::from_iterator(free.len(), free.iter().map(|&i| r[i]));
            let zf = wff.lu().solve(&rhs).expect("principal minors of a positive definite matrix are regular");
            for (j, &i) in free.iter().enumerate() {
                z[i] = zf[j];
            }
        }
        let zeta = omega - w * &z;
        let scale = 1e-11 * (1.0 + omega.amax());
        if bounds.iter().all(|&(d, g)| z[d] <= g + scale) && active.iter().all(|&(d, _)| zeta[d] >= -scale) {
            return z;
        }
    }
    panic!("no KKT point found")
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let p = rod(16, 200);
    let err = rod_sup_error(&solve_forward(&p, 1e-10).map_err(|e| e.to_string())?, 16);
    let secs = start.elapsed().as_secs_f64();
    let fine = rod_sup_error(&solve_forward(&rod(16, 400), 1e-10).map_err(|e| e.to_string())?, 16);
    let ratio = err / fine;
    check(
        err <= 1e-3 && secs <= 5.0 && ratio >= 3.5,
        format!("sup error {err:.3e} in {secs:.2} s, error ratio on doubling M {ratio:.3}"),
    )
}

fn criterion_2() -> Outcome {
    let tol = 1e-10;
    let p = rod(16, 200);
    let u = solve_forward(&p, tol).map_err(|e| e.to_string())?;
    let eq = equivalence_check(&p, &u, tol).map_err(|e| e.to_string())?;
    let picard = solve_picard(&p, &Trajectory::zeros(*p.grid(), 16), tol, 500).map_err(|e| e.to_string())?;
    let gap = picard.trajectory.max_abs_difference(&u);
    check(
        eq.max_vi_residual <= 10.0 * tol && eq.max_fixedpoint_residual <= 10.0 * tol && gap <= 20.0 * tol,
        format!(
            "vi residual {:.3e}, fixed-point residual {:.3e}, forward vs Picard {gap:.3e} ({} sweeps)",
            eq.max_vi_residual, eq.max_fixedpoint_residual, picard.sweeps
        ),
    )
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let tol = 1e-10;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut problems = vec![rod(8, 40)];
    for _ in 0..3 {
        let n = rng.gen_range(3..=4);
        let g = rng.gen_range(0.0..0.3);
        problems.push(random_history_problem(&mut rng, n, 40, vec![(n - 1, g)]));
    }
    let rod_k = derived_constants(&problems[0]).k;
    if (rod_k - std::f64::consts::E).abs() > 1e-12 {
        return Err(format!("rod K = {rod_k}, expected e"));
    }
    let mut worst: f64 = 0.0;
    for p in &problems {
        let n = p.n_dof();
        let k = derived_constants(p).k;
        for _ in 0..20 {
            let a = Vector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            let freq = rng.gen_range(0.5..6.0);
            let amp = rng.gen_range(0.01..2.0);
            let delta = LoadHistory::from_fn(*p.grid(), |t| &a * (amp * (freq * t).cos())).unwrap();
            let other = p.load().axpy(1.0, &delta);
            let rep = lipschitz_probe(p, &other, tol).map_err(|e| e.to_string())?;
            if rep.ratio > k + 1e-6 {
                return Err(format!("ratio {} exceeds K = {k}", rep.ratio));
            }
            worst = worst.max(rep.ratio / k);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs <= 60.0, format!("80 perturbations, largest ratio/K {worst:.4}, {secs:.1} s"))
}

fn criterion_4() -> Outcome {
    let tol = 1e-10;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.gen_range(2..=5);
        let k = rng.gen_range(1..=3.min(n));
        let mut dofs: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            dofs.swap(i, rng.gen_range(0..=i));
        }
        let bounds: Vec<(usize, f64)> = dofs[..k].iter().map(|&d| (d, rng.gen_range(-0.5..0.5))).collect();
        let grid = TimeGrid::new(1.0, 2).unwrap();
        let space = random_space(&mut rng, n);
        let b = random_stiffness(&mut rng, n, 1.0);
        let p = HdviProblem::new(
            space,
            b,
            RelaxationKernel::zero(n),
            ComplianceLaw::none(),
            ConstraintSet::new(n, bounds.clone()).unwrap(),
            LoadHistory::zeros(grid, n),
            grid,
            ProblemOptions::default(),
        )
        .unwrap();
        let omega = Vector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0));
        let z0 = Vector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let z = solve_evi(&p, &omega, &z0, tol).map_err(|e| e.to_string())?.z;
        let oracle = active_set_oracle(p.operator(), &omega, &bounds);
        let gap = (&z - &oracle).amax();
        if gap > 10.0 * tol {
            return Err(format!("instance with {n} dofs disagrees by {gap:.3e}"));
        }
        worst = worst.max(gap);
    }
    Ok(format!("50 instances, largest disagreement {worst:.3e}"))
}

fn criterion_5() -> Outcome {
    let tol = 1e-10;
    let p = rod(16, 200);
    let taus = [1e-1, 1e-2, 1e-3, 1e-4];
    let fd = fd_validate(&p, p.load(), &taus, 2.0, tol).map_err(|e| e.to_string())?;
    let perturbations: Vec<LoadHistory> = taus.iter().map(|t| p.load().scaled(1.0 + t)).collect();
    let h = hadamard_probe(&p, p.load(), &perturbations, &taus, 2.0, tol).map_err(|e| e.to_string())?;
    let last = *fd.errors.last().unwrap();
    let floor = (10.0 * tol).max(fd.errors[0] / 10.0);
    let diag_decreasing = h.diagonal_errors.windows(2).all(|w| w[1] < w[0]);
    check(
        fd.is_nonincreasing(10.0 * tol) && last <= 1e-3 && h.within_factor(2.0, floor) && diag_decreasing,
        format!("fd errors {}, Hadamard diagonal errors {}", sci(&fd.errors), sci(&h.diagonal_errors)),
    )
}

fn criterion_6() -> Outcome {
    let tol = 1e-10;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut pinned = 0usize;
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let n = rng.gen_range(3..=4);
        let bounds = vec![(n - 1, rng.gen_range(0.0..0.1)), (n - 2, rng.gen_range(0.0..0.1))];
        let base_problem = random_history_problem(&mut rng, n, 20, bounds);
        // push both bounded dofs into their obstacles
        let mut push = Vector::zeros(n);
        push[n - 1] = 3.0;
        push[n - 2] = 3.0;
        let load = base_problem.load().axpy(1.0, &LoadHistory::constant(*base_problem.grid(), push));
        let p = base_problem.with_load(load).unwrap();
        let base = solve_forward(&p, tol).map_err(|e| e.to_string())?;
        let ds = DerivativeSolver::new(&p, &base, &Thresholds::default()).map_err(|e| e.to_string())?;
        let a = Vector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let delta = LoadHistory::from_fn(*p.grid(), |t| &a * (1.0 + t)).unwrap();
        let d1 = ds.solve(&delta, tol).map_err(|e| e.to_string())?;
        let d2 = ds.solve(&delta.scaled(2.0), tol).map_err(|e| e.to_string())?;
        for (k, cone) in d1.cones.iter().enumerate() {
            for &(dof, _) in p.constraints().bounded() {
                if cone.tag(dof) == ConeTag::Zero {
                    pinned += 1;
                    if d1.values[k][dof] != 0.0 || d2.values[k][dof] != 0.0 {
                        return Err(format!("pinned dof {dof} at node {k} moved"));
                    }
                }
            }
        }
        for (a, b) in d1.values.iter().zip(&d2.values) {
            worst = worst.max((b - a * 2.0).amax());
        }
    }
    check(pinned > 0 && worst <= 10.0 * tol, format!("{pinned} pinned node-dofs, homogeneity defect {worst:.3e}"))
}

fn criterion_7() -> Outcome {
    let p = rod(4, 20);
    let map = rod_traction_map(4, LoadHistory::zeros(*p.grid(), 4)).unwrap();
    let dagger = Control::constant(p.grid(), Vector::from_element(1, 0.5), None).unwrap();
    let load = control_to_load(&dagger, &map, p.grid()).unwrap();
    let target = solve_forward(&p.with_load(load).unwrap(), 1e-10).map_err(|e| e.to_string())?.last().clone();
    let objective = Objective::new(1.0, 1e-6, target).unwrap();
    let g0 = Control::constant(p.grid(), Vector::zeros(1), None).unwrap();
    let res = minimize(&p, &map, &g0, &objective, &MinimizeOptions { max_iters: 50, ..Default::default() })
        .map_err(|e| e.to_string())?;
    let first = res.history.first().unwrap().total;
    let last = res.history.last().unwrap().total;
    let decreasing = res.history.windows(2).all(|w| w[1].total < w[0].total);
    check(
        res.converged && res.iterations <= 50 && last <= 0.1 * first && decreasing && res.best_probe >= -1e-6,
        format!(
            "cost {first:.3e} -> {last:.3e} in {} iterations, smallest probe derivative {:.3e}",
            res.iterations, res.best_probe
        ),
    )
}

fn criterion_8() -> Outcome {
    let tol = 1e-10;
    let p = rod(8, 40);
    let solution = solve_forward(&p, tol).map_err(|e| e.to_string())?;
    let mut dir = Vector::zeros(8);
    dir[rod_contact_dof(8)] = 1.0;
    let eps: Vec<f64> = (1..=100).map(|k| 1.0 / k as f64).collect();
    let members = p_approximating_sequence(&p, &dir, &eps, tol).map_err(|e| e.to_string())?;
    let k_const = derived_constants(&p).k;
    let mut worst_margin = f64::INFINITY;
    for (u, e) in members.iter().zip(&eps) {
        let d = u.c_distance(&solution, p.space());
        let bound = e / p.m_b() * (derived_constants(&p).c * p.grid().t_end()).exp() + 1e-8;
        if d > bound {
            return Err(format!("member with eps {e} at distance {d:.3e} above {bound:.3e}"));
        }
        worst_margin = worst_margin.min(bound - d);
    }
    let diag = verify_t4_bound(&p, &members, tol).map_err(|e| e.to_string())?;
    if diag.bound.to_bits() != k_const.to_bits() {
        return Err("stability constant differs from K".into());
    }
    let q6 = rod(4, 40);
    let seq = ex6_sequence(&q6, 4, &[1, 10, 100, 1000]).map_err(|e| e.to_string())?;
    let infeasible = seq.iter().all(|u| !p_residual(&q6, u).unwrap().is_feasible());
    let q: Vec<f64> = seq.iter().map(|u| q_residual(&q6, u, tol).unwrap()).collect();
    let q_ok = q.windows(2).all(|w| w[1] < w[0]) && q[2] <= 0.05 && q[3] <= 0.05 && q[2] <= 10.0 * q[3] + 1e-6;
    let ex6 = verify_t4_bound(&q6, &seq, tol).map_err(|e| e.to_string())?;
    check(
        infeasible && q_ok && ex6.all_infeasible() && ex6.q_tail_decreasing(4),
        format!(
            "100 p-members within bound (smallest margin {worst_margin:.3e}); ex6 infeasible for p, q-residuals {}",
            sci(&q)
        ),
    )
}

fn scenario_files() -> Vec<PathBuf> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
        .expect("scenarios directory")
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    files
}

fn csv_bodies(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

fn criterion_9() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_hdvi");
    let files = scenario_files();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut compared = 0;
    for f in &files {
        let stem = f.file_stem().unwrap().to_string_lossy().into_owned();
        let mut runs = Vec::new();
        for r in 0..2 {
            let out = tmp.path().join(format!("{stem}-{r}"));
            let status = Command::new(bin)
                .args(["run", f.to_str().unwrap(), "--out", out.to_str().unwrap(), "--threads", "1"])
                .output()
                .map_err(|e| e.to_string())?;
            if !status.status.success() {
                return Err(format!("{stem} exited with {:?}", status.status.code()));
            }
            runs.push(csv_bodies(&out));
        }
        if runs[0].is_empty() || runs[0] != runs[1] {
            return Err(format!("{stem}: CSV outputs differ between runs"));
        }
        compared += runs[0].len();
    }
    Ok(format!("{} scenarios, {compared} CSV files byte-identical", files.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("analytic regression", criterion_1),
        ("equivalence of formulations", criterion_2),
        ("Lipschitz bound", criterion_3),
        ("active-set oracle", criterion_4),
        ("directional differentiability", criterion_5),
        ("derivative cone invariants", criterion_6),
        ("optimal control", criterion_7),
        ("well-posedness", criterion_8),
        ("determinism", criterion_9),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("criterion {} [{name}]: PASS ({detail})", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} [{name}]: FAIL ({detail})", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
