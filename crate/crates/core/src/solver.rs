//! Outer iterative loop: repeated stagewise Newton steps with merit-function
//! backtracking line search, plus the decoupled mu = 0 path and the
//! degeneracy (mu breakdown) search.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::inv_quad;
use crate::newton_step::{compute_step, StepError, StepOptions};
use crate::objective::{merit, ObjectiveError};
use crate::problem::{compute_residuals, Iterate, ProblemError, StagewiseProblem};

#[derive(Debug, Error)]
pub enum SolverError {
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
}

/// Line-search and termination settings: Armijo constant 1/4, halving
/// backtracking, stop when the merit decrease falls below 1e-12.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub tol_merit_decrease: f64,
    /// Gradient-based stop: the iterate counts as converged once the squared
    /// gradient norm falls below this, whether or not the line search can
    /// still certify a merit decrease above the floating-point floor.
    pub tol_grad_sq: f64,
    pub max_iters: usize,
    pub armijo_c: f64,
    pub alpha_shrink: f64,
    pub alpha_min: f64,
    pub gauss_newton: bool,
    pub verbose: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol_merit_decrease: 1e-12,
            tol_grad_sq: 1e-9,
            max_iters: 200,
            armijo_c: 0.25,
            alpha_shrink: 0.5,
            alpha_min: (0.5f64).powi(20),
            gauss_newton: false,
            verbose: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolverStatus {
    Converged,
    MaxIters,
    LineSearchFailed,
    /// A positive-definiteness condition failed; mu is too large for this
    /// instance.
    Degenerate,
}

/// One accepted iteration.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub merit: f64,
    pub grad_sq: f64,
    pub alpha: f64,
}

#[derive(Clone, Debug)]
pub struct SolveResult {
    pub iterate: Iterate,
    pub status: SolverStatus,
    pub trace: Vec<IterationRecord>,
    /// Pass/index detail when `status == Degenerate`.
    pub degeneracy: Option<String>,
}

impl SolveResult {
    /// Iteration trace as CSV (header + one row per accepted iteration).
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("iter,merit,grad_sq,alpha\n");
        for r in &self.trace {
            out.push_str(&format!(
                "{},{:.16e},{:.16e},{:.16e}\n",
                r.iter, r.merit, r.grad_sq, r.alpha
            ));
        }
        out
    }

    pub fn converged(&self) -> bool {
        self.status == SolverStatus::Converged
    }
}

/// Solve to a stationary point of J. Dispatches to the decoupled path when
/// mu = 0.
pub fn solve(
    problem: &StagewiseProblem,
    initial: Iterate,
    options: &SolverOptions,
) -> Result<SolveResult, SolverError> {
    if problem.mu == 0.0 {
        return solve_decoupled(problem, initial, options);
    }
    let step_options = StepOptions {
        gauss_newton: options.gauss_newton,
    };

    let mut iterate = initial;
    let mut f_m = merit(problem, &iterate)?;
    let mut trace = Vec::new();

    for iter in 0..options.max_iters {
        if f_m <= options.tol_merit_decrease {
            return Ok(SolveResult {
                iterate,
                status: SolverStatus::Converged,
                trace,
                degeneracy: None,
            });
        }

        let (step, diag) = match compute_step(problem, &iterate, step_options) {
            Ok(v) => v,
            Err(StepError::Degenerate { pass, index }) => {
                return Ok(SolveResult {
                    iterate,
                    status: SolverStatus::Degenerate,
                    trace,
                    degeneracy: Some(format!("{pass} at index {index} (iteration {iter})")),
                })
            }
            Err(StepError::Objective(e)) => return Err(e.into()),
            Err(StepError::Problem(e)) => return Err(e.into()),
        };
        let grad_sq = diag.grad_sq.expect("grad available on mu != 0 path");
        if grad_sq < options.tol_grad_sq {
            return Ok(SolveResult {
                iterate,
                status: SolverStatus::Converged,
                trace,
                degeneracy: None,
            });
        }

        // Backtracking Armijo on the merit function. The directional
        // derivative along the Newton direction is -||grad J||^2.
        let mut alpha = 1.0;
        let accepted = loop {
            let mut trial = iterate.clone();
            trial.step(&step, alpha);
            let f_trial = merit(problem, &trial)?;
            if f_trial.is_finite() && f_trial <= f_m - options.armijo_c * alpha * grad_sq {
                break Some((trial, f_trial));
            }
            alpha *= options.alpha_shrink;
            if alpha < options.alpha_min {
                break None;
            }
        };
        let Some((next, f_next)) = accepted else {
            return Ok(SolveResult {
                iterate,
                status: SolverStatus::LineSearchFailed,
                trace,
                degeneracy: None,
            });
        };

        let decrease = f_m - f_next;
        iterate = next;
        f_m = f_next;
        trace.push(IterationRecord {
            iter,
            merit: f_m,
            grad_sq,
            alpha,
        });
        if options.verbose {
            eprintln!("iter {iter:4}  merit {f_m:.6e}  |grad|^2 {grad_sq:.6e}  alpha {alpha:.3e}");
        }
        if decrease < options.tol_merit_decrease {
            return Ok(SolveResult {
                iterate,
                status: SolverStatus::Converged,
                trace,
                degeneracy: None,
            });
        }
    }

    Ok(SolveResult {
        iterate,
        status: SolverStatus::MaxIters,
        trace,
        degeneracy: None,
    })
}

/// Weighted squared residual sum over the measured prefix; the estimation
/// surrogate merit of the decoupled path.
fn past_merit(problem: &StagewiseProblem, iterate: &Iterate) -> Result<f64, ProblemError> {
    let residuals = compute_residuals(problem, iterate);
    let mut m = inv_quad(problem.prior()?, &residuals.w[0]);
    for j in 1..=problem.split {
        m += inv_quad(problem.process(j)?, &residuals.w[j]);
        m += inv_quad(problem.meas(j)?, &residuals.gamma[j - 1]);
    }
    Ok(0.5 * m)
}

/// Gradient of [`past_merit`] with respect to x_0..x_t.
fn past_merit_grad(
    problem: &StagewiseProblem,
    iterate: &Iterate,
) -> Result<Vec<DVector<f64>>, ProblemError> {
    let residuals = compute_residuals(problem, iterate);
    let split = problem.split;
    let mut grad = Vec::with_capacity(split + 1);
    for k in 0..=split {
        let mut g = if k == 0 {
            problem.prior()?.solve_vec(&residuals.w[0])
        } else {
            problem.process(k)?.solve_vec(&residuals.w[k])
        };
        if k < split {
            let u = problem.control_at(iterate, k);
            let f_x = problem.dynamics[k].f_x(&iterate.x[k], u);
            let qw = problem.process(k + 1)?.solve_vec(&residuals.w[k + 1]);
            g.gemv_tr(-1.0, &f_x, &qw, 1.0);
        }
        if k >= 1 {
            let h_x = problem.meas_models[k - 1].h_x(&iterate.x[k]);
            let rg = problem.meas(k)?.solve_vec(&residuals.gamma[k - 1]);
            g.gemv_tr(-1.0, &h_x, &rg, 1.0);
        }
        grad.push(g);
    }
    Ok(grad)
}

/// Total running + terminal cost of the zero-disturbance rollout from x_t
/// under the free controls; the control surrogate merit of the decoupled
/// path. Also returns the rolled-out states x_t..x_T.
fn control_merit(
    problem: &StagewiseProblem,
    x_t: &DVector<f64>,
    controls: &[DVector<f64>],
) -> Result<(f64, Vec<DVector<f64>>), ProblemError> {
    let split = problem.split;
    let mut states = Vec::with_capacity(controls.len() + 1);
    states.push(x_t.clone());
    let mut cost = 0.0;
    for (i, u) in controls.iter().enumerate() {
        let k = split + i;
        cost += problem.costs[k].l(&states[i], u);
        let next = problem.dynamics[k].f(&states[i], u);
        if !next.iter().all(|v| v.is_finite()) {
            return Err(ProblemError::Diverged(k + 1));
        }
        states.push(next);
    }
    cost += problem.terminal_cost.l(states.last().unwrap());
    Ok((cost, states))
}

/// Gradient of [`control_merit`] with respect to the free controls, by
/// adjoint accumulation along the rollout.
fn control_merit_grad(
    problem: &StagewiseProblem,
    states: &[DVector<f64>],
    controls: &[DVector<f64>],
) -> Vec<DVector<f64>> {
    let split = problem.split;
    let n = controls.len();
    let mut grad = vec![DVector::zeros(0); n];
    let mut lambda = problem.terminal_cost.l_x(states.last().unwrap());
    for i in (0..n).rev() {
        let k = split + i;
        let x = &states[i];
        let u = &controls[i];
        let f_u = problem.dynamics[k].f_u(x, u);
        let mut g = problem.costs[k].l_u(x, u);
        g.gemv_tr(1.0, &f_u, &lambda, 1.0);
        grad[i] = g;
        let f_x = problem.dynamics[k].f_x(x, u);
        let mut new_lambda = problem.costs[k].l_x(x, u);
        new_lambda.gemv_tr(1.0, &f_x, &lambda, 1.0);
        lambda = new_lambda;
    }
    grad
}

/// The decoupled mu = 0 solver: an iterated Kalman smoother step on the
/// measured prefix and a DDP-style step on the future controls, each with
/// its own Armijo backtracking on a surrogate merit. Future states are kept
/// on the zero-disturbance rollout from x_t.
pub fn solve_decoupled(
    problem: &StagewiseProblem,
    initial: Iterate,
    options: &SolverOptions,
) -> Result<SolveResult, SolverError> {
    let split = problem.split;
    let t_len = problem.horizon;
    let step_options = StepOptions {
        gauss_newton: options.gauss_newton,
    };

    let mut iterate = initial;
    let mut trace = Vec::new();

    for iter in 0..options.max_iters {
        let (step, _diag) = match compute_step(problem, &iterate, step_options) {
            Ok(v) => v,
            Err(StepError::Degenerate { pass, index }) => {
                return Ok(SolveResult {
                    iterate,
                    status: SolverStatus::Degenerate,
                    trace,
                    degeneracy: Some(format!("{pass} at index {index} (iteration {iter})")),
                })
            }
            Err(StepError::Objective(e)) => return Err(e.into()),
            Err(StepError::Problem(e)) => return Err(e.into()),
        };

        // Estimation update on x_0..x_t.
        let pm = past_merit(problem, &iterate)?;
        let pg = past_merit_grad(problem, &iterate)?;
        let grad_sq_past: f64 = pg.iter().map(|g| g.norm_squared()).sum();
        let d_past: f64 = pg
            .iter()
            .zip(step.p_x.iter())
            .map(|(g, p)| g.dot(p))
            .sum();
        let mut past_decrease = 0.0;
        let mut alpha_e = 1.0;
        if grad_sq_past >= options.tol_grad_sq
            && d_past < 0.0
            && step.p_x[..=split].iter().any(|p| p.amax() > 0.0)
        {
            loop {
                let mut trial = iterate.clone();
                for k in 0..=split {
                    trial.x[k].axpy(alpha_e, &step.p_x[k], 1.0);
                }
                let pm_trial = past_merit(problem, &trial)?;
                if pm_trial.is_finite() && pm_trial <= pm + options.armijo_c * alpha_e * d_past {
                    past_decrease = pm - pm_trial;
                    for k in 0..=split {
                        iterate.x[k] = trial.x[k].clone();
                    }
                    break;
                }
                alpha_e *= options.alpha_shrink;
                if alpha_e < options.alpha_min {
                    // The smoother direction is a descent direction, so
                    // exhaustion means curvature dominates the remaining
                    // gradient; keep the current prefix and move on.
                    break;
                }
            }
        }

        // Control update on u_t..u_{T-1}, future states restored to the
        // rollout from the updated x_t.
        let mut ctl_decrease = 0.0;
        let mut grad_sq_ctl = 0.0;
        let mut alpha_c = 1.0;
        if split < t_len {
            let (cm, states) = control_merit(problem, &iterate.x[split], &iterate.u)?;
            let cg = control_merit_grad(problem, &states, &iterate.u);
            grad_sq_ctl = cg.iter().map(|g| g.norm_squared()).sum();
            let d_ctl: f64 = cg.iter().zip(step.p_u.iter()).map(|(g, p)| g.dot(p)).sum();
            if grad_sq_ctl >= options.tol_grad_sq
                && d_ctl < 0.0
                && step.p_u.iter().any(|p| p.amax() > 0.0)
            {
                loop {
                    let trial_u: Vec<DVector<f64>> = iterate
                        .u
                        .iter()
                        .zip(step.p_u.iter())
                        .map(|(u, p)| u + p * alpha_c)
                        .collect();
                    match control_merit(problem, &iterate.x[split], &trial_u) {
                        Ok((cm_trial, trial_states))
                            if cm_trial.is_finite()
                                && cm_trial <= cm + options.armijo_c * alpha_c * d_ctl =>
                        {
                            ctl_decrease = cm - cm_trial;
                            iterate.u = trial_u;
                            for (i, s) in trial_states.into_iter().enumerate() {
                                iterate.x[split + i] = s;
                            }
                            break;
                        }
                        _ => {}
                    }
                    alpha_c *= options.alpha_shrink;
                    if alpha_c < options.alpha_min {
                        break;
                    }
                }
            }
            if ctl_decrease == 0.0 {
                // Keep the future states consistent with x_t even when the
                // controls did not move.
                let (_, states) = control_merit(problem, &iterate.x[split], &iterate.u)?;
                for (i, s) in states.into_iter().enumerate() {
                    iterate.x[split + i] = s;
                }
            }
        }

        let total_decrease = past_decrease + ctl_decrease;
        trace.push(IterationRecord {
            iter,
            merit: past_merit(problem, &iterate)?
                + if split < t_len {
                    control_merit(problem, &iterate.x[split], &iterate.u)?.0
                } else {
                    0.0
                },
            grad_sq: grad_sq_past + grad_sq_ctl,
            alpha: alpha_e.min(alpha_c),
        });
        if options.verbose {
            let r = trace.last().unwrap();
            eprintln!(
                "iter {iter:4}  surrogate {:.6e}  |grad|^2 {:.6e}  alpha {:.3e}",
                r.merit, r.grad_sq, r.alpha
            );
        }

        if total_decrease < options.tol_merit_decrease {
            return Ok(SolveResult {
                iterate,
                status: SolverStatus::Converged,
                trace,
                degeneracy: None,
            });
        }
    }

    Ok(SolveResult {
        iterate,
        status: SolverStatus::MaxIters,
        trace,
        degeneracy: None,
    })
}

/// Result of the breakdown search.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct BreakdownResult {
    /// Smallest mu at which the game degenerates, refined to two
    /// significant digits; equals the upper grid bound when `bounded` is
    /// false.
    pub mu: f64,
    /// Whether a breakdown was actually observed on the grid.
    pub bounded: bool,
}

fn degenerates_at(
    problem: &StagewiseProblem,
    initial: &Iterate,
    options: &SolverOptions,
    mu: f64,
) -> Result<bool, SolverError> {
    let mut p = problem.clone();
    p.mu = mu;
    let result = solve(&p, initial.clone(), options)?;
    if result.status == SolverStatus::Degenerate {
        return Ok(true);
    }
    // Probe the converged (or last) iterate once more so a breakdown that
    // only appears at the solution is also caught.
    match compute_step(
        &p,
        &result.iterate,
        StepOptions {
            gauss_newton: options.gauss_newton,
        },
    ) {
        Ok(_) => Ok(false),
        Err(StepError::Degenerate { .. }) => Ok(true),
        Err(StepError::Objective(e)) => Err(e.into()),
        Err(StepError::Problem(e)) => Err(e.into()),
    }
}

/// Scan an increasing grid of positive mu values for the smallest one at
/// which any pass reports a degenerate game, then bisect to two significant
/// digits.
pub fn find_mu_breakdown(
    problem: &StagewiseProblem,
    initial: &Iterate,
    options: &SolverOptions,
    mu_grid: &[f64],
) -> Result<BreakdownResult, SolverError> {
    assert!(!mu_grid.is_empty());
    let mut lo = 0.0;
    let mut hi = None;
    for &mu in mu_grid {
        if degenerates_at(problem, initial, options, mu)? {
            hi = Some(mu);
            break;
        }
        lo = mu;
    }
    let Some(mut hi) = hi else {
        return Ok(BreakdownResult {
            mu: *mu_grid.last().unwrap(),
            bounded: false,
        });
    };
    while hi - lo > 0.005 * hi {
        let mid = 0.5 * (lo + hi);
        if degenerates_at(problem, initial, options, mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(BreakdownResult { mu: hi, bounded: true })
}
