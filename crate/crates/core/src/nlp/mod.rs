//! Nonlinear programming layer: a sparse convex QP solver ([`qp`]) and an
//! SQP driver on top of it ([`sqp`]), plus the shared solve-report types.
//!
//! Both solvers are deterministic: identical inputs and options produce
//! bit-identical iterates, which the simulation layer relies on for
//! reproducible scenario runs.

pub mod qp;
pub mod sqp;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

/// Terminal state of a solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    /// KKT residual at or below the requested tolerance.
    Converged,
    /// Iteration budget exhausted; best iterate returned.
    MaxIter,
    /// Primal infeasibility certified; see `worst_violation`.
    Infeasible,
    /// Line-search failure, unboundedness, or a failed factorization.
    NumericalFailure,
}

/// The most violated constraint of an infeasible (or unconverged) problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorstViolation {
    /// Row index in the solver's stacked constraint ordering.
    pub row: usize,
    /// Violation magnitude at the final iterate.
    pub amount: f64,
}

/// Outcome of a QP or NLP solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub solution: DVector<f64>,
    /// Constraint multipliers in the solver's stacked row ordering
    /// (sign convention: stationarity reads `∇f + Jᵀλ = 0`, so upper-active
    /// rows carry positive multipliers and lower-active rows negative ones).
    pub multipliers: DVector<f64>,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub status: SolveStatus,
    /// Populated when `status` is `Infeasible` (and on `MaxIter` for
    /// diagnosis).
    pub worst_violation: Option<WorstViolation>,
    /// SQP only: merit-function value after each accepted step.
    pub merit_history: Vec<f64>,
}

impl SolveReport {
    pub fn converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }
}
