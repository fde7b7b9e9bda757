//! `hdvi` command line: `run`, `validate` and `constants` on scenario documents.
//!
//! Exit codes: 0 success, 2 parse error, 3 validation error, 4 solver error,
//! 5 i/o error. Every failure prints a JSON error document on stderr; `run`
//! also leaves `error.json` and a `manifest.json` with `"status": "failed"`.

mod run;
pub mod scenario;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use crate::error::SolverError;
pub use run::{constants, load, run, RunManifest};
pub use scenario::{Overrides, Plan, Scenario};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { message: String, line: usize, column: usize },
    #[error("invalid field `{field}`: {message}")]
    Validation { field: String, message: String },
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

impl From<crate::model::ModelError> for CliError {
    fn from(e: crate::model::ModelError) -> Self {
        CliError::Solver(e.into())
    }
}

impl From<crate::algebra::AlgebraError> for CliError {
    fn from(e: crate::algebra::AlgebraError) -> Self {
        CliError::Solver(e.into())
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Parse { .. } => 2,
            CliError::Validation { .. } => 3,
            CliError::Solver(_) => 4,
            CliError::Io { .. } => 5,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Parse { .. } => "parse",
            CliError::Validation { .. } => "validation",
            CliError::Solver(_) => "solver",
            CliError::Io { .. } => "io",
        }
    }

    /// Machine-readable error document.
    pub fn document(&self) -> Value {
        let mut doc = json!({
            "status": "error",
            "kind": self.kind(),
            "exit_code": self.exit_code(),
            "message": self.to_string(),
        });
        match self {
            CliError::Parse { line, column, .. } => {
                doc["line"] = json!(line);
                doc["column"] = json!(column);
            }
            CliError::Validation { field, .. } => doc["field"] = json!(field),
            CliError::Io { path, .. } => doc["path"] = json!(path),
            CliError::Solver(_) => {}
        }
        doc
    }
}

#[derive(Debug, Parser)]
#[command(name = "hdvi", version, about = "History-dependent variational inequality solver for viscoelastic contact")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a scenario and write CSV outputs and a manifest.
    Run {
        scenario: PathBuf,
        #[arg(long, env = "HDVI_OUT_DIR", default_value = "hdvi-out")]
        out: PathBuf,
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Check a scenario against the schema without solving.
    Validate {
        scenario: PathBuf,
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Print the derived constants of a scenario.
    Constants {
        scenario: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
}

fn with_threads<T>(threads: usize, f: impl FnOnce() -> Result<T, CliError> + Send) -> Result<T, CliError>
where
    T: Send,
{
    if threads == 0 {
        return Err(CliError::Validation { field: "--threads".into(), message: "must be at least 1".into() });
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Validation { field: "--threads".into(), message: e.to_string() })?;
    pool.install(f)
}

fn report_failure(out: &Path, error: &CliError) {
    let doc = error.document();
    eprintln!("{}", serde_json::to_string_pretty(&doc).expect("json value serializes"));
    if std::fs::create_dir_all(out).is_ok() {
        let _ = run::write_json(&out.join("error.json"), &doc);
        let manifest = json!({ "status": "failed", "error": doc, "files": ["error.json"] });
        let _ = run::write_json(&out.join("manifest.json"), &manifest);
    }
}

/// Parses the process arguments, runs the command and returns the exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { scenario, out, tol, steps, threads } => {
            let overrides = Overrides { tol, steps };
            match with_threads(threads, || run(&scenario, &out, &overrides, threads)) {
                Ok(manifest) => {
                    println!("{}", serde_json::to_string_pretty(&manifest).expect("manifest serializes"));
                    0
                }
                Err(e) => {
                    report_failure(&out, &e);
                    e.exit_code()
                }
            }
        }
        Command::Validate { scenario, tol, steps } => match load(&scenario, &Overrides { tol, steps }) {
            Ok((plan, hash)) => {
                let doc = json!({
                    "status": "valid",
                    "mode": plan.mode.as_str(),
                    "n_dof": plan.problem.n_dof(),
                    "steps": plan.problem.grid().steps(),
                    "scenario_sha256": hash,
                });
                println!("{}", serde_json::to_string_pretty(&doc).expect("json value serializes"));
                0
            }
            Err(e) => {
                eprintln!("{}", serde_json::to_string_pretty(&e.document()).expect("json value serializes"));
                e.exit_code()
            }
        },
        Command::Constants { scenario, steps } => match load(&scenario, &Overrides { tol: None, steps }) {
            Ok((plan, _)) => {
                println!("{}", serde_json::to_string_pretty(&constants(&plan)).expect("json value serializes"));
                0
            }
            Err(e) => {
                eprintln!("{}", serde_json::to_string_pretty(&e.document()).expect("json value serializes"));
                e.exit_code()
            }
        },
    }
}
