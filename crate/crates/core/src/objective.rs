//! The unconstrained saddle objective, its gradient blocks, the merit
//! function and the augmented stage Hessians.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::problem::{compute_residuals, contract, Iterate, ProblemError, Residuals, StagewiseProblem};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("objective is undefined at mu = 0; use the decoupled solver path")]
    MuZero,
    #[error("model at stage {0} provides no second-derivative tensors; enable gauss_newton")]
    MissingTensors(usize),
    #[error(transparent)]
    Problem(#[from] ProblemError),
}

/// Gradient of J split into per-stage blocks.
#[derive(Clone, Debug)]
pub struct GradientBlocks {
    /// dJ/dx_k for k = 0..T.
    pub g_x: Vec<DVector<f64>>,
    /// dJ/du_k for k = t..T-1, indexed `[k-t]`.
    pub g_u: Vec<DVector<f64>>,
}

impl GradientBlocks {
    pub fn squared_norm(&self) -> f64 {
        self.g_x.iter().map(|g| g.norm_squared()).sum::<f64>()
            + self.g_u.iter().map(|g| g.norm_squared()).sum::<f64>()
    }
}

/// Cost Hessians augmented with the residual-weighted second derivatives of
/// the dynamics and measurement models.
#[derive(Clone, Debug)]
pub struct AugmentedStageHessians {
    /// lbar^xx_k for k = 0..T-1.
    pub lbar_xx: Vec<DMatrix<f64>>,
    /// lbar^xu_k for k = 0..T-1.
    pub lbar_xu: Vec<DMatrix<f64>>,
    /// lbar^uu_k for k = 0..T-1.
    pub lbar_uu: Vec<DMatrix<f64>>,
    /// Terminal Hessian; carries the measurement augmentation when t = T.
    pub terminal_xx: DMatrix<f64>,
}

/// First-order data shared by the gradient, the stagewise passes and the
/// dense assembly: model Jacobians, cost gradients and weighted residuals,
/// all evaluated at one iterate.
pub struct Linearization {
    pub residuals: Residuals,
    /// f^x_k, f^u_k for k = 0..T-1.
    pub f_x: Vec<DMatrix<f64>>,
    pub f_u: Vec<DMatrix<f64>>,
    /// h^x_j for j = 1..t, indexed `[j-1]`.
    pub h_x: Vec<DMatrix<f64>>,
    /// l^x_k, l^u_k for k = 0..T-1 (past stages evaluated at the applied control).
    pub l_x: Vec<DVector<f64>>,
    pub l_u: Vec<DVector<f64>>,
    pub lt_x: DVector<f64>,
    /// P^{-1} w_0.
    pub pinv_w0: DVector<f64>,
    /// Q_j^{-1} w_j for j = 1..T, indexed `[j-1]`.
    pub qinv_w: Vec<DVector<f64>>,
    /// R_j^{-1} gamma_j for j = 1..t, indexed `[j-1]`.
    pub rinv_gamma: Vec<DVector<f64>>,
}

/// Evaluate Jacobians, cost gradients and weighted residuals at `iterate`.
pub fn linearize(
    problem: &StagewiseProblem,
    iterate: &Iterate,
) -> Result<Linearization, ProblemError> {
    let t_len = problem.horizon;
    let residuals = compute_residuals(problem, iterate);

    let mut f_x = Vec::with_capacity(t_len);
    let mut f_u = Vec::with_capacity(t_len);
    let mut l_x = Vec::with_capacity(t_len);
    let mut l_u = Vec::with_capacity(t_len);
    for k in 0..t_len {
        let u = problem.control_at(iterate, k);
        f_x.push(problem.dynamics[k].f_x(&iterate.x[k], u));
        f_u.push(problem.dynamics[k].f_u(&iterate.x[k], u));
        l_x.push(problem.costs[k].l_x(&iterate.x[k], u));
        l_u.push(problem.costs[k].l_u(&iterate.x[k], u));
    }
    let lt_x = problem.terminal_cost.l_x(&iterate.x[t_len]);

    let mut h_x = Vec::with_capacity(problem.split);
    for j in 1..=problem.split {
        h_x.push(problem.meas_models[j - 1].h_x(&iterate.x[j]));
    }

    let pinv_w0 = problem.prior()?.solve_vec(&residuals.w[0]);
    let mut qinv_w = Vec::with_capacity(t_len);
    for j in 1..=t_len {
        qinv_w.push(problem.process(j)?.solve_vec(&residuals.w[j]));
    }
    let mut rinv_gamma = Vec::with_capacity(problem.split);
    for j in 1..=problem.split {
        rinv_gamma.push(problem.meas(j)?.solve_vec(&residuals.gamma[j - 1]));
    }

    Ok(Linearization {
        residuals,
        f_x,
        f_u,
        h_x,
        l_x,
        l_u,
        lt_x,
        pinv_w0,
        qinv_w,
        rinv_gamma,
    })
}

/// The saddle objective J. Undefined at mu = 0.
pub fn eval_j(problem: &StagewiseProblem, iterate: &Iterate) -> Result<f64, ObjectiveError> {
    if problem.mu == 0.0 {
        return Err(ObjectiveError::MuZero);
    }
    let t_len = problem.horizon;
    let residuals = compute_residuals(problem, iterate);

    let mut cost = 0.0;
    for k in 0..t_len {
        cost += problem.costs[k].l(&iterate.x[k], problem.control_at(iterate, k));
    }
    cost += problem.terminal_cost.l(&iterate.x[t_len]);

    let mut quad = crate::linalg::inv_quad(problem.prior()?, &residuals.w[0]);
    for j in 1..=problem.split {
        quad += crate::linalg::inv_quad(problem.meas(j)?, &residuals.gamma[j - 1]);
    }
    for j in 1..=t_len {
        quad += crate::linalg::inv_quad(problem.process(j)?, &residuals.w[j]);
    }

    Ok(cost - quad / (2.0 * problem.mu))
}

/// Gradient blocks of J from a precomputed linearization.
pub fn grad_from_linearization(
    problem: &StagewiseProblem,
    lin: &Linearization,
) -> GradientBlocks {
    let t_len = problem.horizon;
    let split = problem.split;
    let mu_inv = 1.0 / problem.mu;

    let mut g_x = Vec::with_capacity(t_len + 1);
    for k in 0..=t_len {
        let mut g = if k < t_len {
            lin.l_x[k].clone()
        } else {
            lin.lt_x.clone()
        };
        // - (1/mu) W_k^{-1} w_k (prior weight at k = 0)
        if k == 0 {
            g.axpy(-mu_inv, &lin.pinv_w0, 1.0);
        } else {
            g.axpy(-mu_inv, &lin.qinv_w[k - 1], 1.0);
        }
        // + (1/mu) f^x_k^T Q_{k+1}^{-1} w_{k+1}
        if k < t_len {
            g.gemv_tr(mu_inv, &lin.f_x[k], &lin.qinv_w[k], 1.0);
        }
        // + (1/mu) h^x_k^T R_k^{-1} gamma_k for measured times
        if k >= 1 && k <= split {
            g.gemv_tr(mu_inv, &lin.h_x[k - 1], &lin.rinv_gamma[k - 1], 1.0);
        }
        g_x.push(g);
    }

    let mut g_u = Vec::with_capacity(t_len - split);
    for k in split..t_len {
        let mut g = lin.l_u[k].clone();
        g.gemv_tr(mu_inv, &lin.f_u[k], &lin.qinv_w[k], 1.0);
        g_u.push(g);
    }

    GradientBlocks { g_x, g_u }
}

pub fn grad_j(
    problem: &StagewiseProblem,
    iterate: &Iterate,
) -> Result<GradientBlocks, ObjectiveError> {
    if problem.mu == 0.0 {
        return Err(ObjectiveError::MuZero);
    }
    let lin = linearize(problem, iterate)?;
    Ok(grad_from_linearization(problem, &lin))
}

/// Merit function: half the squared norm of the full gradient of J.
pub fn merit(problem: &StagewiseProblem, iterate: &Iterate) -> Result<f64, ObjectiveError> {
    Ok(0.5 * grad_j(problem, iterate)?.squared_norm())
}

/// Augmented stage Hessians. The residual-weighted tensor contractions are
/// scaled by 1/mu; with `gauss_newton` they are dropped entirely. At mu = 0
/// the plain cost Hessians are returned (the decoupled path).
pub fn augmented_hessians(
    problem: &StagewiseProblem,
    iterate: &Iterate,
    lin: &Linearization,
    gauss_newton: bool,
) -> Result<AugmentedStageHessians, ObjectiveError> {
    let t_len = problem.horizon;
    let split = problem.split;
    let drop_tensors = gauss_newton || problem.mu == 0.0;
    let mu_inv = if drop_tensors { 0.0 } else { 1.0 / problem.mu };

    let mut lbar_xx = Vec::with_capacity(t_len);
    let mut lbar_xu = Vec::with_capacity(t_len);
    let mut lbar_uu = Vec::with_capacity(t_len);
    for k in 0..t_len {
        let u = problem.control_at(iterate, k);
        let mut xx = problem.costs[k].l_xx(&iterate.x[k], u);
        let mut xu = problem.costs[k].l_xu(&iterate.x[k], u);
        let mut uu = problem.costs[k].l_uu(&iterate.x[k], u);
        if !drop_tensors {
            if !problem.dynamics[k].has_tensors() {
                return Err(ObjectiveError::MissingTensors(k));
            }
            xx += contract(&lin.qinv_w[k], &problem.dynamics[k].f_xx(&iterate.x[k], u)) * mu_inv;
            xu += contract(&lin.qinv_w[k], &problem.dynamics[k].f_xu(&iterate.x[k], u)) * mu_inv;
            uu += contract(&lin.qinv_w[k], &problem.dynamics[k].f_uu(&iterate.x[k], u)) * mu_inv;
            if k >= 1 && k <= split {
                if !problem.meas_models[k - 1].has_tensors() {
                    return Err(ObjectiveError::MissingTensors(k));
                }
                xx += contract(
                    &lin.rinv_gamma[k - 1],
                    &problem.meas_models[k - 1].h_xx(&iterate.x[k]),
                ) * mu_inv;
            }
        }
        crate::linalg::symmetrize(&mut xx);
        crate::linalg::symmetrize(&mut uu);
        lbar_xx.push(xx);
        lbar_xu.push(xu);
        lbar_uu.push(uu);
    }

    let mut terminal_xx = problem.terminal_cost.l_xx(&iterate.x[t_len]);
    // When the split reaches the horizon the last measurement sits at the
    // terminal state, so its curvature lands on the terminal block.
    if split == t_len && split >= 1 && !drop_tensors {
        if !problem.meas_models[split - 1].has_tensors() {
            return Err(ObjectiveError::MissingTensors(split));
        }
        terminal_xx += contract(
            &lin.rinv_gamma[split - 1],
            &problem.meas_models[split - 1].h_xx(&iterate.x[t_len]),
        ) * mu_inv;
        crate::linalg::symmetrize(&mut terminal_xx);
    }

    Ok(AugmentedStageHessians {
        lbar_xx,
        lbar_xu,
        lbar_uu,
        terminal_xx,
    })
}
