//! Ground-truth dense Newton solve: assembles the full gradient and Hessian
//! of J over the stacked variable (x_{0:T}, u_{t:T-1}) and factorizes it
//! directly. O(T^3); used by equivalence tests and the `check` subcommand,
//! never by the production solver.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg::symmetrize;
use crate::newton_step::NewtonStep;
use crate::objective::{
    augmented_hessians, grad_from_linearization, linearize, ObjectiveError,
};
use crate::problem::{Iterate, ProblemError, StagewiseProblem};

#[derive(Debug, Error)]
pub enum DenseError {
    #[error("dense system is singular")]
    Singular,
    #[error("dense assembly requires mu != 0; use decoupled_step at mu = 0")]
    MuZero,
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
}

/// The stacked Newton system `H p = -g` with its block layout.
pub struct DenseSystem {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub n_x: usize,
    pub n_u: usize,
    pub horizon: usize,
    pub split: usize,
}

impl DenseSystem {
    pub fn x_offset(&self, k: usize) -> usize {
        k * self.n_x
    }

    pub fn u_offset(&self, k: usize) -> usize {
        (self.horizon + 1) * self.n_x + (k - self.split) * self.n_u
    }

    pub fn dim(&self) -> usize {
        (self.horizon + 1) * self.n_x + (self.horizon - self.split) * self.n_u
    }

    fn split_step(&self, p: DVector<f64>) -> NewtonStep {
        let mut p_x = Vec::with_capacity(self.horizon + 1);
        for k in 0..=self.horizon {
            p_x.push(p.rows(self.x_offset(k), self.n_x).into_owned());
        }
        let mut p_u = Vec::with_capacity(self.horizon - self.split);
        for k in self.split..self.horizon {
            p_u.push(p.rows(self.u_offset(k), self.n_u).into_owned());
        }
        NewtonStep { p_x, p_u }
    }
}

/// Assemble the full Hessian and gradient of J at `iterate`.
pub fn assemble(
    problem: &StagewiseProblem,
    iterate: &Iterate,
    gauss_newton: bool,
) -> Result<DenseSystem, DenseError> {
    if problem.mu == 0.0 {
        return Err(DenseError::MuZero);
    }
    let t_len = problem.horizon;
    let split = problem.split;
    let n_x = problem.dim_x();
    let n_u = problem.dim_u();
    let mu_inv = 1.0 / problem.mu;

    let lin = linearize(problem, iterate)?;
    let lbar = augmented_hessians(problem, iterate, &lin, gauss_newton)?;
    let grad = grad_from_linearization(problem, &lin);

    let dim = (t_len + 1) * n_x + (t_len - split) * n_u;
    let mut h = DMatrix::zeros(dim, dim);
    let mut g = DVector::zeros(dim);

    let sys = DenseSystem {
        h: DMatrix::zeros(0, 0),
        g: DVector::zeros(0),
        n_x,
        n_u,
        horizon: t_len,
        split,
    };

    for (k, gx) in grad.g_x.iter().enumerate() {
        g.rows_mut(sys.x_offset(k), n_x).copy_from(gx);
    }
    for (k, gu) in grad.g_u.iter().enumerate() {
        g.rows_mut(sys.u_offset(split + k), n_u).copy_from(gu);
    }

    // Diagonal state blocks.
    for k in 0..=t_len {
        let mut block = if k < t_len {
            lbar.lbar_xx[k].clone()
        } else {
            lbar.terminal_xx.clone()
        };
        let w_inv = if k == 0 {
            problem.prior()?.inverse()
        } else {
            problem.process(k)?.inverse()
        };
        block -= w_inv * mu_inv;
        if k < t_len {
            let q_next = problem.process(k + 1)?;
            block -= lin.f_x[k].transpose() * q_next.solve_mat(&lin.f_x[k]) * mu_inv;
        }
        if k >= 1 && k <= split {
            let r = problem.meas(k)?;
            block -= lin.h_x[k - 1].transpose() * r.solve_mat(&lin.h_x[k - 1]) * mu_inv;
        }
        h.view_mut((sys.x_offset(k), sys.x_offset(k)), (n_x, n_x))
            .copy_from(&block);
    }

    // Chain couplings and control blocks.
    for k in 0..t_len {
        let q_next = problem.process(k + 1)?;
        let qinv_fx = q_next.solve_mat(&lin.f_x[k]);
        let cross = qinv_fx.transpose() * mu_inv;
        h.view_mut((sys.x_offset(k), sys.x_offset(k + 1)), (n_x, n_x))
            .copy_from(&cross);
        h.view_mut((sys.x_offset(k + 1), sys.x_offset(k)), (n_x, n_x))
            .copy_from(&cross.transpose());

        if k >= split {
            let qinv_fu = q_next.solve_mat(&lin.f_u[k]);
            let mut uu = lbar.lbar_uu[k].clone();
            uu -= lin.f_u[k].transpose() * &qinv_fu * mu_inv;
            h.view_mut((sys.u_offset(k), sys.u_offset(k)), (n_u, n_u))
                .copy_from(&uu);

            let mut xu = lbar.lbar_xu[k].clone();
            xu -= lin.f_x[k].transpose() * &qinv_fu * mu_inv;
            h.view_mut((sys.x_offset(k), sys.u_offset(k)), (n_x, n_u))
                .copy_from(&xu);
            h.view_mut((sys.u_offset(k), sys.x_offset(k)), (n_u, n_x))
                .copy_from(&xu.transpose());

            let xu_next = qinv_fu * mu_inv;
            h.view_mut((sys.x_offset(k + 1), sys.u_offset(k)), (n_x, n_u))
                .copy_from(&xu_next);
            h.view_mut((sys.u_offset(k), sys.x_offset(k + 1)), (n_u, n_x))
                .copy_from(&xu_next.transpose());
        }
    }

    symmetrize(&mut h);

    Ok(DenseSystem {
        h,
        g,
        n_x,
        n_u,
        horizon: t_len,
        split,
    })
}

/// Solve `H p = -g` by pivoted LU. The orientation matches the stagewise
/// passes: the returned step is a descent direction of the merit function.
pub fn solve_dense(system: &DenseSystem) -> Result<NewtonStep, DenseError> {
    let lu = system.h.clone().lu();
    let p = lu.solve(&(-&system.g)).ok_or(DenseError::Singular)?;
    let res = (&system.h * &p + &system.g).norm();
    if !res.is_finite() || res > 1e-10 * (1.0 + system.g.norm()) {
        return Err(DenseError::Singular);
    }
    Ok(system.split_step(p))
}

/// Dense reference for the decoupled mu = 0 direction: a Gauss-Newton solve
/// of the measurement/process residual system over the past states, followed
/// by a condensed quadratic solve of the control problem over the future
/// controls with gap-closing linearized dynamics.
pub fn decoupled_step(
    problem: &StagewiseProblem,
    iterate: &Iterate,
) -> Result<NewtonStep, DenseError> {
    let t_len = problem.horizon;
    let split = problem.split;
    let n_x = problem.dim_x();
    let n_u = problem.dim_u();
    let lin = linearize(problem, iterate)?;
    let lbar = augmented_hessians(problem, iterate, &lin, true)?;

    // Past block: normal equations of the weighted residual least squares.
    let dim_past = (split + 1) * n_x;
    let mut normal = DMatrix::zeros(dim_past, dim_past);
    let mut rhs = DVector::zeros(dim_past);

    let p_inv = problem.prior()?.inverse();
    normal.view_mut((0, 0), (n_x, n_x)).add_assign_block(&p_inv);
    rhs.rows_mut(0, n_x).copy_from(&(&p_inv * &lin.residuals.w[0]));

    for j in 1..=split {
        let q = problem.process(j)?;
        let q_inv = q.inverse();
        let f_x = &lin.f_x[j - 1];
        let a = sub_block(j - 1, n_x);
        let b = sub_block(j, n_x);
        let qf = &q_inv * f_x;
        add_block(&mut normal, a, a, &(f_x.transpose() * &qf));
        add_block(&mut normal, a, b, &(-qf.transpose()));
        add_block(&mut normal, b, a, &(-&qf));
        add_block(&mut normal, b, b, &q_inv);
        let qw = &q_inv * &lin.residuals.w[j];
        add_rows(&mut rhs, a, &(-(f_x.transpose() * &qw)));
        add_rows(&mut rhs, b, &qw);

        let r = problem.meas(j)?;
        let h_x = &lin.h_x[j - 1];
        add_block(&mut normal, b, b, &(h_x.transpose() * r.solve_mat(h_x)));
        add_rows(
            &mut rhs,
            b,
            &(-(h_x.transpose() * r.solve_vec(&lin.residuals.gamma[j - 1]))),
        );
    }

    let lu = normal.lu();
    let delta = lu.solve(&(-rhs)).ok_or(DenseError::Singular)?;
    let mut p_x: Vec<DVector<f64>> = (0..=split)
        .map(|k| delta.rows(k * n_x, n_x).into_owned())
        .collect();

    // Future block: condense the linearized gap-closing dynamics into an
    // affine map x = M u + m and minimize the local quadratic cost model.
    let m_dim = (t_len - split) * n_u;
    let mut p_u = Vec::new();
    if m_dim > 0 {
        let mut big_a = DMatrix::zeros(m_dim, m_dim);
        let mut big_b = DVector::zeros(m_dim);
        let mut m_mat = DMatrix::zeros(n_x, m_dim);
        let mut m_vec = p_x[split].clone();

        for k in split..t_len {
            let uo = (k - split) * n_u;
            // stage cost model
            let l_xx = &lbar.lbar_xx[k];
            let l_xu = &lbar.lbar_xu[k];
            let l_uu = &lbar.lbar_uu[k];
            big_a += m_mat.transpose() * l_xx * &m_mat;
            let mxu = m_mat.transpose() * l_xu;
            add_block_cols(&mut big_a, uo, n_u, &mxu);
            add_block_at(&mut big_a, uo, uo, l_uu);
            let grad_x = &lin.l_x[k] + l_xx * &m_vec;
            big_b += m_mat.transpose() * &grad_x;
            let grad_u = &lin.l_u[k] + l_xu.transpose() * &m_vec;
            add_rows(&mut big_b, (uo, n_u), &grad_u);

            // advance the affine map: x_{k+1} = f^x x_k + f^u u_k - w_{k+1}
            let mut m_next = &lin.f_x[k] * &m_mat;
            let fu_block = &lin.f_u[k];
            for c in 0..n_u {
                for r in 0..n_x {
                    m_next[(r, uo + c)] += fu_block[(r, c)];
                }
            }
            m_vec = &lin.f_x[k] * &m_vec - &lin.residuals.w[k + 1];
            m_mat = m_next;
        }
        let lt_xx = &lbar.terminal_xx;
        big_a += m_mat.transpose() * lt_xx * &m_mat;
        big_b += m_mat.transpose() * &(&lin.lt_x + lt_xx * &m_vec);
        symmetrize(&mut big_a);

        let du = big_a.lu().solve(&(-big_b)).ok_or(DenseError::Singular)?;

        // reconstruct states
        let mut x_cur = p_x[split].clone();
        for k in split..t_len {
            let uk = du.rows((k - split) * n_u, n_u).into_owned();
            let x_next = &lin.f_x[k] * &x_cur + &lin.f_u[k] * &uk - &lin.residuals.w[k + 1];
            p_x.push(x_next.clone());
            p_u.push(uk);
            x_cur = x_next;
        }
    }

    Ok(NewtonStep { p_x, p_u })
}

type Block = (usize, usize);

fn sub_block(k: usize, n: usize) -> Block {
    (k * n, n)
}

fn add_block(m: &mut DMatrix<f64>, row: Block, col: Block, val: &DMatrix<f64>) {
    if val.nrows() == 0 {
        return;
    }
    let mut v = m.view_mut((row.0, col.0), (row.1, col.1));
    v += val;
}

fn add_block_at(m: &mut DMatrix<f64>, row: usize, col: usize, val: &DMatrix<f64>) {
    let mut v = m.view_mut((row, col), (val.nrows(), val.ncols()));
    v += val;
}

/// Adds `val` (n x n_u) into column block `col` and its transpose into the
/// mirrored row block.
fn add_block_cols(m: &mut DMatrix<f64>, col: usize, n_u: usize, val: &DMatrix<f64>) {
    let n = val.nrows();
    {
        let mut v = m.view_mut((0, col), (n, n_u));
        v += val;
    }
    let vt = val.transpose();
    let mut v = m.view_mut((col, 0), (n_u, n));
    v += &vt;
}

fn add_rows(v: &mut DVector<f64>, row: Block, val: &DVector<f64>) {
    let mut r = v.rows_mut(row.0, row.1);
    r += val;
}

trait AddAssignBlock {
    fn add_assign_block(&mut self, other: &DMatrix<f64>);
}

impl AddAssignBlock for nalgebra::DMatrixViewMut<'_, f64> {
    fn add_assign_block(&mut self, other: &DMatrix<f64>) {
        *self += other;
    }
}
