//! Solvers for quasistatic contact problems of viscoelastic bodies with long
//! memory, posed as history-dependent variational inequalities on a box of
//! admissible displacements.
//!
//! The crate covers the forward solve (time marching and Picard sweeps), the
//! directional derivative of the load-to-solution map, load control by
//! projected descent, and diagnostics for approximating sequences.

pub mod algebra;
pub mod cli;
pub mod control;
pub mod error;
pub mod evi;
pub mod hdvi;
pub mod model;
pub mod sensitivity;
pub mod wellposed;

pub use algebra::{DenseMatrix, Quadrature, TimeGrid, Vector};
pub use error::SolverError;
pub use model::{build_rod_example, derived_constants, DerivedConstants, HdviProblem};
