use thiserror::Error;

use crate::algebra::AlgebraError;
use crate::model::ModelError;

/// Failures of the iterative solvers and the diagnostics built on them.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error(transparent)]
    Algebra(#[from] AlgebraError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    MaxIterations { iterations: usize, residual: f64 },
    #[error("non-finite iterate at iteration {iteration}")]
    NonFiniteIterate { iteration: usize },
    #[error("step contraction factor {factor:e} is not below 1; use more time steps")]
    StepContractionViolated { factor: f64 },
    #[error("multiplier {multiplier:e} at active dof {dof} has the wrong sign")]
    InconsistentMultiplier { dof: usize, multiplier: f64 },
    #[error("perturbation has zero norm on the grid")]
    DegenerateDenominator,
    #[error("Picard iteration did not converge in {sweeps} sweeps (last change {change:e})")]
    MaxSweeps { sweeps: usize, change: f64 },
    #[error("line search failed at iteration {iteration} after {halvings} halvings")]
    LineSearchFailed { iteration: usize, halvings: usize },
    #[error("{kind} bound violated by member {member}: distance {distance:e} > bound {bound:e}")]
    BoundViolated { member: usize, kind: &'static str, distance: f64, bound: f64 },
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch { what: &'static str, expected: usize, found: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
