//! Trajectory optimization for dynamic games with imperfect state observation.
//!
//! The solver finds local Nash equilibria of a minimax control problem where
//! an adversary picks process and measurement disturbances. Each Newton
//! direction is computed in O(T) by a five-pass recursion: an estimation
//! forward pass over the measured prefix, a control backward pass over the
//! future, a coupling equation at the current time, and the two matching
//! substitution passes. An outer loop with a merit function and backtracking
//! line search makes the iteration globally convergent.

#[cfg(feature = "dense-oracle")]
pub mod dense_oracle;
pub(crate) mod linalg;
pub mod models;
pub mod mpc_sim;
pub mod newton_step;
pub mod objective;
pub mod problem;
pub mod solver;

pub use newton_step::{compute_step, NewtonStep, StepError};
pub use problem::{Iterate, Residuals, StagewiseProblem};
pub use solver::{solve, solve_decoupled, SolveResult, SolverOptions, SolverStatus};
