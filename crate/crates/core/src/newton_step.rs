//! The stagewise Newton direction: estimation forward pass, control backward
//! pass, coupling, estimation backward pass and control forward pass.
//!
//! All Gamma-inverse products are applied through the symmetric matrix
//! `S_{k+1} = Q_{k+1}^{-1} - mu V_{k+1}`: since `Gamma_{k+1} = S_{k+1} Q_{k+1}`,
//! positive-definiteness of `S` is equivalent to the well-posedness condition
//! on `Gamma`, and one Cholesky factorization per stage serves both the
//! backward and forward recursions. `Gamma^{-1} V` is symmetric in exact
//! arithmetic (`Q^{-1} S^{-1} V = (Q^{-1} S^{-1} Q^{-1} - Q^{-1}) / mu`); it is
//! symmetrized after each product to suppress drift.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg::{symmetrize, SpdFactor};
use crate::objective::{
    augmented_hessians, grad_from_linearization, linearize, AugmentedStageHessians, Linearization,
    ObjectiveError,
};
use crate::problem::{Iterate, ProblemError, StagewiseProblem};

#[derive(Debug, Error)]
pub enum StepError {
    /// A positive-definiteness condition failed: the game is degenerate at
    /// the reported pass and time index (typically mu too large).
    #[error("degenerate game in {pass} at index {index}")]
    Degenerate { pass: &'static str, index: usize },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
}

/// The Newton direction `p`.
#[derive(Clone, Debug)]
pub struct NewtonStep {
    /// p_{x_k} for k = 0..T.
    pub p_x: Vec<DVector<f64>>,
    /// p_{u_k} for k = t..T-1, indexed `[k-t]`.
    pub p_u: Vec<DVector<f64>>,
}

impl NewtonStep {
    pub fn norm(&self) -> f64 {
        let s: f64 = self.p_x.iter().map(|p| p.norm_squared()).sum::<f64>()
            + self.p_u.iter().map(|p| p.norm_squared()).sum::<f64>();
        s.sqrt()
    }
}

/// Output of the control backward pass over stages t..T.
pub struct ControlPassData {
    /// Value Hessians V_k for k = t..T, indexed `[k-t]`.
    pub v_mat: Vec<DMatrix<f64>>,
    /// Value gradients v_k for k = t..T, indexed `[k-t]`.
    pub v_vec: Vec<DVector<f64>>,
    /// Feedback gains G_k for k = t..T-1, indexed `[k-t]`.
    pub gain: Vec<DMatrix<f64>>,
    /// Feedforward terms g_k for k = t..T-1, indexed `[k-t]`.
    pub feedforward: Vec<DVector<f64>>,
    /// Cholesky factor of `S_{k+1} = Q_{k+1}^{-1} - mu V_{k+1}` for
    /// k = t..T-1, indexed `[k-t]`; reused by the forward substitution.
    shift: Vec<SpdFactor>,
}

/// Output of the estimation forward pass over stages 0..t.
pub struct EstimationPassData {
    /// Covariance analogues P_k for k = 0..t.
    pub p_cov: Vec<DMatrix<f64>>,
    /// Innovation states mu_hat_k for k = 0..t.
    pub mu_hat: Vec<DVector<f64>>,
    /// E_{k+1} factors for k = 0..t-1, indexed `[k]`.
    e_factor: Vec<SpdFactor>,
    /// P_k factors for k = 0..t.
    p_factor: Vec<SpdFactor>,
    /// Kalman-like gains K_{k+1} for k = 0..t-1.
    pub gain: Vec<DMatrix<f64>>,
    /// Predicted covariances Pbar_{k+1} for k = 0..t-1.
    pub p_bar: Vec<DMatrix<f64>>,
}

/// Options for a single Newton direction.
#[derive(Clone, Copy, Debug, Default)]
pub struct StepOptions {
    /// Drop all second-derivative tensor contractions.
    pub gauss_newton: bool,
}

/// Per-call diagnostics.
#[derive(Clone, Debug, Default)]
pub struct StepDiagnostics {
    /// Squared gradient norm of J at the iterate (absent on the mu = 0 path).
    pub grad_sq: Option<f64>,
    /// (pass name, seconds) in execution order.
    pub pass_seconds: Vec<(&'static str, f64)>,
}

/// Backward recursion over the future stages (Prop. 1 recursions).
pub fn control_backward_pass(
    problem: &StagewiseProblem,
    lin: &Linearization,
    lbar: &AugmentedStageHessians,
) -> Result<ControlPassData, StepError> {
    let t_len = problem.horizon;
    let split = problem.split;
    let mu = problem.mu;
    let n = t_len - split;

    let mut v_mat = vec![DMatrix::zeros(0, 0); n + 1];
    let mut v_vec = vec![DVector::zeros(0); n + 1];
    let mut gain = vec![DMatrix::zeros(0, 0); n];
    let mut feedforward = vec![DVector::zeros(0); n];
    let mut shift = Vec::with_capacity(n);

    v_mat[n] = lbar.terminal_xx.clone();
    v_vec[n] = lin.lt_x.clone();

    for k in (split..t_len).rev() {
        let idx = k - split;
        let q_next = problem.process(k + 1)?;
        let v_next = &v_mat[idx + 1];
        let vv_next = &v_vec[idx + 1];
        let w_next = &lin.residuals.w[k + 1];

        // S_{k+1} = Q_{k+1}^{-1} - mu V_{k+1}
        let mut s = q_next.inverse();
        s += v_next * (-mu);
        symmetrize(&mut s);
        let s_factor = SpdFactor::new(&s).ok_or(StepError::Degenerate {
            pass: "control_backward",
            index: k + 1,
        })?;

        // Gamma^{-1} V_{k+1} = Q^{-1} S^{-1} V, symmetric.
        let mut gv = q_next.solve_mat(&s_factor.solve_mat(v_next));
        symmetrize(&mut gv);
        // Gamma^{-1} (v_{k+1} - V_{k+1} w_{k+1})
        let rhs = vv_next - v_next * w_next;
        let gvw = q_next.solve_vec(&s_factor.solve_vec(&rhs));

        let f_x = &lin.f_x[k];
        let f_u = &lin.f_u[k];
        let gv_fx = &gv * f_x;
        let gv_fu = &gv * f_u;

        let mut q_uu = &lbar.lbar_uu[k] + f_u.transpose() * &gv_fu;
        symmetrize(&mut q_uu);
        let q_uu_factor = SpdFactor::new(&q_uu).ok_or(StepError::Degenerate {
            pass: "control_backward",
            index: k,
        })?;
        let q_ux = lbar.lbar_xu[k].transpose() + f_u.transpose() * &gv_fx;
        let q_u = &lin.l_u[k] + f_u.transpose() * &gvw;

        let g_mat = -q_uu_factor.solve_mat(&q_ux);
        let g_vec = -q_uu_factor.solve_vec(&q_u);

        let mut v_k = &lbar.lbar_xx[k] + f_x.transpose() * &gv_fx + q_ux.transpose() * &g_mat;
        symmetrize(&mut v_k);
        let v_k_vec = &lin.l_x[k] + f_x.transpose() * &gvw + q_ux.transpose() * &g_vec;

        v_mat[idx] = v_k;
        v_vec[idx] = v_k_vec;
        gain[idx] = g_mat;
        feedforward[idx] = g_vec;
        shift.push(s_factor);
    }
    shift.reverse();

    Ok(ControlPassData {
        v_mat,
        v_vec,
        gain,
        feedforward,
        shift,
    })
}

/// Forward recursion over the past stages (Prop. 2 recursions).
pub fn estimation_forward_pass(
    problem: &StagewiseProblem,
    lin: &Linearization,
    lbar: &AugmentedStageHessians,
) -> Result<EstimationPassData, StepError> {
    let split = problem.split;
    let mu = problem.mu;
    let n_x = problem.dim_x();

    let mut p_cov = Vec::with_capacity(split + 1);
    let mut mu_hat = Vec::with_capacity(split + 1);
    let mut e_factor = Vec::with_capacity(split);
    let mut p_factor = Vec::with_capacity(split + 1);
    let mut gain = Vec::with_capacity(split);
    let mut p_bar_all = Vec::with_capacity(split);

    p_cov.push(problem.prior_weight.clone());
    p_factor.push(problem.prior()?.clone());
    mu_hat.push(-&lin.residuals.w[0]);

    for k in 0..split {
        let q_next = problem.process(k + 1)?;
        let f_x = &lin.f_x[k];
        let h_x = &lin.h_x[k]; // h^x_{k+1}
        let r_next = &problem.meas_weights[k]; // R_{k+1}

        let p_inv = p_factor[k].inverse();

        // A_k = P_k^{-1} - mu lbar^xx_k, required positive-definite.
        let mut a = p_inv.clone();
        a += &lbar.lbar_xx[k] * (-mu);
        symmetrize(&mut a);
        let a_factor = SpdFactor::new(&a).ok_or(StepError::Degenerate {
            pass: "estimation_forward",
            index: k,
        })?;

        // E_{k+1} = A_k + f^x^T Q_{k+1}^{-1} f^x
        let mut e = a + f_x.transpose() * q_next.solve_mat(f_x);
        symmetrize(&mut e);
        let e_fac = SpdFactor::new(&e).ok_or(StepError::Degenerate {
            pass: "estimation_forward",
            index: k + 1,
        })?;

        // Pbar_{k+1} = Q_{k+1} + f^x A_k^{-1} f^x^T
        let mut p_bar = &problem.process_weights[k] + f_x * a_factor.solve_mat(&f_x.transpose());
        symmetrize(&mut p_bar);

        // K_{k+1} = Pbar h^T (R + h Pbar h^T)^{-1}
        let h_pbar = h_x * &p_bar;
        let mut innov = r_next + &h_pbar * h_x.transpose();
        symmetrize(&mut innov);
        let innov_factor = SpdFactor::new(&innov).ok_or(StepError::Degenerate {
            pass: "estimation_forward",
            index: k + 1,
        })?;
        let k_gain = innov_factor.solve_mat(&h_pbar).transpose();

        // P_{k+1} = (I - K h) Pbar
        let i_kh = DMatrix::identity(n_x, n_x) - &k_gain * h_x;
        let mut p_next = &i_kh * &p_bar;
        symmetrize(&mut p_next);
        let p_next_factor = SpdFactor::new(&p_next).ok_or(StepError::Degenerate {
            pass: "estimation_forward",
            index: k + 1,
        })?;

        // mu_hat_{k+1}
        let mut m = &i_kh * (f_x * &mu_hat[k] - &lin.residuals.w[k + 1])
            + &k_gain * &lin.residuals.gamma[k];
        if mu != 0.0 {
            let inner = &lbar.lbar_xx[k] * &mu_hat[k] + &lin.l_x[k];
            let corr = &p_next * q_next.solve_vec(&(f_x * e_fac.solve_vec(&inner)));
            m.axpy(mu, &corr, 1.0);
        }

        p_cov.push(p_next);
        p_factor.push(p_next_factor);
        mu_hat.push(m);
        e_factor.push(e_fac);
        gain.push(k_gain);
        p_bar_all.push(p_bar);
    }

    Ok(EstimationPassData {
        p_cov,
        mu_hat,
        e_factor,
        p_factor,
        gain,
        p_bar: p_bar_all,
    })
}

/// Coupling of the past and future stress at the split time (Prop. 3):
/// `p_{x_t} = (P_t^{-1} - mu V_t)^{-1} (P_t^{-1} mu_hat_t + mu v_t)`.
pub fn couple(
    est: &EstimationPassData,
    ctl: &ControlPassData,
    mu: f64,
    split: usize,
) -> Result<DVector<f64>, StepError> {
    if mu == 0.0 {
        // (P^{-1})^{-1} P^{-1} mu_hat collapses; return the smoother
        // estimate without a factorization round-trip.
        return Ok(est.mu_hat[split].clone());
    }
    let p_t = &est.p_factor[split];
    let p_inv = p_t.inverse();
    let mut c = p_inv.clone();
    c += &ctl.v_mat[0] * (-mu);
    symmetrize(&mut c);
    let c_factor = SpdFactor::new(&c).ok_or(StepError::Degenerate {
        pass: "coupling",
        index: split,
    })?;
    let mut rhs = &p_inv * &est.mu_hat[split];
    rhs.axpy(mu, &ctl.v_vec[0], 1.0);
    Ok(c_factor.solve_vec(&rhs))
}

/// Backward substitution over the past stages (Prop. 2, Eq. for p_{x_k}).
pub fn estimation_backward_pass(
    problem: &StagewiseProblem,
    lin: &Linearization,
    est: &EstimationPassData,
    p_x_t: &DVector<f64>,
) -> Result<Vec<DVector<f64>>, StepError> {
    let split = problem.split;
    let mu = problem.mu;
    let mut p_x = vec![DVector::zeros(0); split + 1];
    p_x[split] = p_x_t.clone();
    for k in (0..split).rev() {
        let q_next = problem.process(k + 1)?;
        let f_x = &lin.f_x[k];
        let rhs = f_x.transpose() * q_next.solve_vec(&(&lin.residuals.w[k + 1] + &p_x[k + 1]))
            + est.p_factor[k].solve_vec(&est.mu_hat[k])
            + &lin.l_x[k] * mu;
        p_x[k] = est.e_factor[k].solve_vec(&rhs);
    }
    Ok(p_x)
}

/// Forward substitution over the future stages (Prop. 1, Eq. for p_u, p_x).
pub fn control_forward_pass(
    problem: &StagewiseProblem,
    lin: &Linearization,
    ctl: &ControlPassData,
    p_x_t: &DVector<f64>,
) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let t_len = problem.horizon;
    let split = problem.split;
    let mu = problem.mu;

    let mut p_u = Vec::with_capacity(t_len - split);
    let mut p_x = Vec::with_capacity(t_len - split + 1);
    p_x.push(p_x_t.clone());

    for k in split..t_len {
        let idx = k - split;
        let pu = &ctl.gain[idx] * &p_x[idx] + &ctl.feedforward[idx];
        // p_{x_{k+1}} = S_{k+1}^{-1} (Q_{k+1}^{-1} (f^x p_x + f^u p_u - w) + mu v_{k+1})
        let lin_next =
            &lin.f_x[k] * &p_x[idx] + &lin.f_u[k] * &pu - &lin.residuals.w[k + 1];
        let mut rhs = problem.process(k + 1).expect("factor checked in backward pass").solve_vec(&lin_next);
        rhs.axpy(mu, &ctl.v_vec[idx + 1], 1.0);
        p_x.push(ctl.shift[idx].solve_vec(&rhs));
        p_u.push(pu);
    }

    (p_u, p_x)
}

/// Full stagewise Newton direction (Algorithm 1). The output is oriented as
/// a descent direction of the merit function: `p^T grad(f_M) = -||grad J||^2`.
pub fn compute_step(
    problem: &StagewiseProblem,
    iterate: &Iterate,
    options: StepOptions,
) -> Result<(NewtonStep, StepDiagnostics), StepError> {
    let mut diag = StepDiagnostics::default();
    let clock = Instant::now();
    let lin = linearize(problem, iterate)?;
    let lbar = augmented_hessians(problem, iterate, &lin, options.gauss_newton)?;
    diag.pass_seconds.push(("linearize", clock.elapsed().as_secs_f64()));

    if problem.mu != 0.0 {
        diag.grad_sq = Some(grad_from_linearization(problem, &lin).squared_norm());
    }

    let clock = Instant::now();
    let est = estimation_forward_pass(problem, &lin, &lbar)?;
    diag.pass_seconds.push(("estimation_forward", clock.elapsed().as_secs_f64()));

    let clock = Instant::now();
    let ctl = control_backward_pass(problem, &lin, &lbar)?;
    diag.pass_seconds.push(("control_backward", clock.elapsed().as_secs_f64()));

    let clock = Instant::now();
    let p_x_t = couple(&est, &ctl, problem.mu, problem.split)?;
    diag.pass_seconds.push(("coupling", clock.elapsed().as_secs_f64()));

    let clock = Instant::now();
    let p_x_past = estimation_backward_pass(problem, &lin, &est, &p_x_t)?;
    diag.pass_seconds.push(("estimation_backward", clock.elapsed().as_secs_f64()));

    let clock = Instant::now();
    let (p_u, p_x_future) = control_forward_pass(problem, &lin, &ctl, &p_x_t);
    diag.pass_seconds.push(("control_forward", clock.elapsed().as_secs_f64()));

    let mut p_x = p_x_past;
    p_x.extend(p_x_future.into_iter().skip(1));

    Ok((NewtonStep { p_x, p_u }, diag))
}
