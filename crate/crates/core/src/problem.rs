//! Problem definition: model callbacks, the game instance, nominal iterates
//! and residual computation.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg::{is_spd, SpdFactor};

/// Relative finite-difference step used by the fallback derivatives.
pub const FD_STEP: f64 = 1e-6;

fn fd_step(v: f64) -> f64 {
    FD_STEP * (1.0 + v.abs())
}

/// Central finite difference of a vector-valued map with respect to one
/// argument, producing the Jacobian column by column.
fn fd_jacobian<F>(f: F, at: &DVector<f64>, out_dim: usize) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let n = at.len();
    let mut jac = DMatrix::zeros(out_dim, n);
    for j in 0..n {
        let h = fd_step(at[j]);
        let mut plus = at.clone();
        plus[j] += h;
        let mut minus = at.clone();
        minus[j] -= h;
        let d = (f(&plus) - f(&minus)) / (2.0 * h);
        jac.set_column(j, &d);
    }
    jac
}

fn fd_gradient<F>(f: F, at: &DVector<f64>) -> DVector<f64>
where
    F: Fn(&DVector<f64>) -> f64,
{
    let n = at.len();
    let mut g = DVector::zeros(n);
    for j in 0..n {
        let h = fd_step(at[j]);
        let mut plus = at.clone();
        plus[j] += h;
        let mut minus = at.clone();
        minus[j] -= h;
        g[j] = (f(&plus) - f(&minus)) / (2.0 * h);
    }
    g
}

/// Second-derivative tensor of a vector map, stored as one symmetric (in the
/// differentiation indices) matrix per output component.
fn fd_tensor<F>(jac: F, at: &DVector<f64>, out_dim: usize, cols: usize) -> Vec<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> DMatrix<f64>,
{
    let n = at.len();
    // d/d at_j of jac -> slice [i][row, j]
    let mut slices = Vec::with_capacity(n);
    for j in 0..n {
        let h = fd_step(at[j]);
        let mut plus = at.clone();
        plus[j] += h;
        let mut minus = at.clone();
        minus[j] -= h;
        slices.push((jac(&plus) - jac(&minus)) / (2.0 * h));
    }
    let mut out = Vec::with_capacity(out_dim);
    for i in 0..out_dim {
        let mut t = DMatrix::zeros(cols, n);
        for (j, s) in slices.iter().enumerate() {
            for r in 0..cols {
                t[(r, j)] = s[(i, r)];
            }
        }
        out.push(t);
    }
    out
}

/// Contraction `sum_i a_i T_i` of a weight vector against a stack of
/// per-output second-derivative matrices.
pub fn contract(a: &DVector<f64>, tensor: &[DMatrix<f64>]) -> DMatrix<f64> {
    assert_eq!(a.len(), tensor.len(), "contraction weight/tensor mismatch");
    let mut out = DMatrix::zeros(tensor[0].nrows(), tensor[0].ncols());
    for (ai, ti) in a.iter().zip(tensor.iter()) {
        out += ti * *ai;
    }
    out
}

/// Transition model `x_{k+1} = f(x_k, u_k)` with its derivatives.
///
/// Implementations provide `f`; every derivative has a central
/// finite-difference fallback (lower accuracy, step `1e-6 * (1 + |v|)`).
pub trait Dynamics: Send + Sync {
    fn dim_x(&self) -> usize;
    fn dim_u(&self) -> usize;

    fn f(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;

    fn f_x(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        fd_jacobian(|xx| self.f(xx, u), x, self.dim_x())
    }

    fn f_u(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        fd_jacobian(|uu| self.f(x, uu), u, self.dim_x())
    }

    /// `f_xx[i][j,l] = d^2 f_i / dx_j dx_l`.
    fn f_xx(&self, x: &DVector<f64>, u: &DVector<f64>) -> Vec<DMatrix<f64>> {
        fd_tensor(|xx| self.f_x(xx, u), x, self.dim_x(), self.dim_x())
    }

    /// `f_xu[i][j,l] = d^2 f_i / dx_j du_l`.
    fn f_xu(&self, x: &DVector<f64>, u: &DVector<f64>) -> Vec<DMatrix<f64>> {
        fd_tensor(|uu| self.f_x(x, uu), u, self.dim_x(), self.dim_x())
    }

    /// `f_uu[i][j,l] = d^2 f_i / du_j du_l`.
    fn f_uu(&self, x: &DVector<f64>, u: &DVector<f64>) -> Vec<DMatrix<f64>> {
        fd_tensor(|uu| self.f_u(x, uu), u, self.dim_x(), self.dim_u())
    }

    /// Whether second-derivative tensors are meaningful for this model.
    /// Models backed by engines without second derivatives return false and
    /// require the Gauss-Newton option.
    fn has_tensors(&self) -> bool {
        true
    }
}

/// Measurement model `y = h(x)` with derivatives.
pub trait Measurement: Send + Sync {
    fn dim_x(&self) -> usize;
    fn dim_y(&self) -> usize;

    fn h(&self, x: &DVector<f64>) -> DVector<f64>;

    fn h_x(&self, x: &DVector<f64>) -> DMatrix<f64> {
        fd_jacobian(|xx| self.h(xx), x, self.dim_y())
    }

    fn h_xx(&self, x: &DVector<f64>) -> Vec<DMatrix<f64>> {
        fd_tensor(|xx| self.h_x(xx), x, self.dim_y(), self.dim_x())
    }

    fn has_tensors(&self) -> bool {
        true
    }
}

/// Running cost `l(x, u)` with derivatives.
pub trait RunningCost: Send + Sync {
    fn dim_x(&self) -> usize;
    fn dim_u(&self) -> usize;

    fn l(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64;

    fn l_x(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        fd_gradient(|xx| self.l(xx, u), x)
    }

    fn l_u(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        fd_gradient(|uu| self.l(x, uu), u)
    }

    fn l_xx(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        let mut h = fd_jacobian(|xx| self.l_x(xx, u), x, self.dim_x());
        crate::linalg::symmetrize(&mut h);
        h
    }

    /// `l_xu[j,l] = d^2 l / dx_j du_l`.
    fn l_xu(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        fd_jacobian(|uu| self.l_x(x, uu), u, self.dim_x())
    }

    fn l_uu(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        let mut h = fd_jacobian(|uu| self.l_u(x, uu), u, self.dim_u());
        crate::linalg::symmetrize(&mut h);
        h
    }
}

/// Terminal cost `l_T(x)`.
pub trait TerminalCost: Send + Sync {
    fn dim_x(&self) -> usize;

    fn l(&self, x: &DVector<f64>) -> f64;

    fn l_x(&self, x: &DVector<f64>) -> DVector<f64> {
        fd_gradient(|xx| self.l(xx), x)
    }

    fn l_xx(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut h = fd_jacobian(|xx| self.l_x(xx), x, self.dim_x());
        crate::linalg::symmetrize(&mut h);
        h
    }
}

/// Full specification of a dynamic game instance.
///
/// Immutable after construction; models are shared behind `Arc` so problem
/// instances can be cloned cheaply (the MPC loop rebuilds one per step).
#[derive(Clone)]
pub struct StagewiseProblem {
    /// Horizon length T (>= 1).
    pub horizon: usize,
    /// Measurement split time t, `0 <= t <= T`.
    pub split: usize,
    /// Game sensitivity. Positive: adversarial. Negative: cooperative.
    /// Zero: certainty-equivalent decoupled limit.
    pub mu: f64,
    /// Prior mean on the initial state.
    pub xhat0: DVector<f64>,
    /// Prior weight P (SPD).
    pub prior_weight: DMatrix<f64>,
    /// Process weights Q_1..Q_T (SPD each), indexed `[j-1]`.
    pub process_weights: Vec<DMatrix<f64>>,
    /// Measurement weights R_1..R_t (SPD each), indexed `[j-1]`.
    pub meas_weights: Vec<DMatrix<f64>>,
    /// Measurement history y_1..y_t, indexed `[j-1]`.
    pub measurements: Vec<DVector<f64>>,
    /// Applied controls u_0..u_{t-1}; data, not decision variables.
    pub past_controls: Vec<DVector<f64>>,
    /// Transition models f_0..f_{T-1}.
    pub dynamics: Vec<Arc<dyn Dynamics>>,
    /// Running costs l_0..l_{T-1}.
    pub costs: Vec<Arc<dyn RunningCost>>,
    /// Measurement models h_1..h_t, indexed `[j-1]`.
    pub meas_models: Vec<Arc<dyn Measurement>>,
    /// Terminal cost l_T.
    pub terminal_cost: Arc<dyn TerminalCost>,

    prior_factor: Option<SpdFactor>,
    process_factors: Vec<Option<SpdFactor>>,
    meas_factors: Vec<Option<SpdFactor>>,
}

/// Nominal trajectory: the Newton iterate. States need not satisfy the
/// dynamics; the gap is the adversary's disturbance.
#[derive(Clone, Debug, PartialEq)]
pub struct Iterate {
    /// x_0..x_T.
    pub x: Vec<DVector<f64>>,
    /// u_t..u_{T-1}, indexed `[k-t]`.
    pub u: Vec<DVector<f64>>,
}

impl Iterate {
    /// In-place update `x += alpha * p_x`, `u += alpha * p_u`.
    pub fn step(&mut self, step: &crate::newton_step::NewtonStep, alpha: f64) {
        for (x, p) in self.x.iter_mut().zip(step.p_x.iter()) {
            x.axpy(alpha, p, 1.0);
        }
        for (u, p) in self.u.iter_mut().zip(step.p_u.iter()) {
            u.axpy(alpha, p, 1.0);
        }
    }
}

/// Process and measurement residuals at an iterate.
#[derive(Clone, Debug)]
pub struct Residuals {
    /// w_0..w_T; `w_0 = x_0 - xhat_0`, `w_{k+1} = x_{k+1} - f_k(x_k, u_k)`.
    pub w: Vec<DVector<f64>>,
    /// gamma_1..gamma_t, indexed `[j-1]`; `gamma_j = y_j - h_j(x_j)`.
    pub gamma: Vec<DVector<f64>>,
}

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("invalid problem: {0}")]
    Invalid(String),
    #[error("state diverged (non-finite) at step {0}")]
    Diverged(usize),
}

/// Findings from [`validate`]; empty means the instance is consistent.
#[derive(Debug, Default, Clone)]
pub struct ValidationReport {
    pub findings: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.findings.is_empty()
    }
}

impl StagewiseProblem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        horizon: usize,
        split: usize,
        mu: f64,
        xhat0: DVector<f64>,
        prior_weight: DMatrix<f64>,
        process_weights: Vec<DMatrix<f64>>,
        meas_weights: Vec<DMatrix<f64>>,
        measurements: Vec<DVector<f64>>,
        past_controls: Vec<DVector<f64>>,
        dynamics: Vec<Arc<dyn Dynamics>>,
        costs: Vec<Arc<dyn RunningCost>>,
        meas_models: Vec<Arc<dyn Measurement>>,
        terminal_cost: Arc<dyn TerminalCost>,
    ) -> Self {
        let prior_factor = SpdFactor::new(&prior_weight);
        let process_factors = process_weights.iter().map(SpdFactor::new).collect();
        let meas_factors = meas_weights.iter().map(SpdFactor::new).collect();
        Self {
            horizon,
            split,
            mu,
            xhat0,
            prior_weight,
            process_weights,
            meas_weights,
            measurements,
            past_controls,
            dynamics,
            costs,
            meas_models,
            terminal_cost,
            prior_factor,
            process_factors,
            meas_factors,
        }
    }

    pub fn dim_x(&self) -> usize {
        self.xhat0.len()
    }

    pub fn dim_u(&self) -> usize {
        self.dynamics.first().map_or(0, |d| d.dim_u())
    }

    /// Cholesky factor of P.
    pub fn prior(&self) -> Result<&SpdFactor, ProblemError> {
        self.prior_factor
            .as_ref()
            .ok_or_else(|| ProblemError::Invalid("P not positive-definite".into()))
    }

    /// Cholesky factor of Q_j, `1 <= j <= T`.
    pub fn process(&self, j: usize) -> Result<&SpdFactor, ProblemError> {
        self.process_factors[j - 1]
            .as_ref()
            .ok_or_else(|| ProblemError::Invalid(format!("Q[{j}] not positive-definite")))
    }

    /// Cholesky factor of R_j, `1 <= j <= t`.
    pub fn meas(&self, j: usize) -> Result<&SpdFactor, ProblemError> {
        self.meas_factors[j - 1]
            .as_ref()
            .ok_or_else(|| ProblemError::Invalid(format!("R[{j}] not positive-definite")))
    }

    /// Control applied at stage `k`: fixed history below the split, free
    /// decision variable at and above it.
    pub fn control_at<'a>(&'a self, iterate: &'a Iterate, k: usize) -> &'a DVector<f64> {
        if k < self.split {
            &self.past_controls[k]
        } else {
            &iterate.u[k - self.split]
        }
    }

    /// Zero-disturbance rollout iterate: roll from `xhat0` under the stored
    /// past controls followed by `free_controls`.
    pub fn rollout_iterate(&self, free_controls: Vec<DVector<f64>>) -> Result<Iterate, ProblemError> {
        assert_eq!(free_controls.len(), self.horizon - self.split);
        let mut controls: Vec<DVector<f64>> = self.past_controls.clone();
        controls.extend(free_controls.iter().cloned());
        let x = rollout(self, &self.xhat0, &controls)?;
        Ok(Iterate {
            x,
            u: free_controls,
        })
    }
}

/// Check dimensions, SPD weights and horizon bounds. Findings are collected
/// rather than raised so a config error report can show everything at once.
pub fn validate(problem: &StagewiseProblem) -> ValidationReport {
    let mut findings = Vec::new();
    let t_len = problem.horizon;
    let split = problem.split;
    let n_x = problem.dim_x();

    if t_len < 1 {
        findings.push("horizon T must be >= 1".to_string());
    }
    if split > t_len {
        findings.push(format!("split time t = {} exceeds horizon T = {}", split, t_len));
    }
    if !is_spd(&problem.prior_weight) {
        findings.push("P not positive-definite".to_string());
    }
    if problem.prior_weight.nrows() != n_x {
        findings.push("P dimension does not match state dimension".to_string());
    }
    if problem.process_weights.len() != t_len {
        findings.push(format!(
            "expected {} process weights, got {}",
            t_len,
            problem.process_weights.len()
        ));
    }
    for (i, q) in problem.process_weights.iter().enumerate() {
        if q.nrows() != n_x || q.ncols() != n_x {
            findings.push(format!("Q[{}] has wrong dimensions", i + 1));
        } else if !is_spd(q) {
            findings.push(format!("Q[{}] not positive-definite", i + 1));
        }
    }
    if problem.meas_weights.len() != split {
        findings.push(format!(
            "expected {} measurement weights, got {}",
            split,
            problem.meas_weights.len()
        ));
    }
    if problem.measurements.len() != split {
        findings.push(format!(
            "expected {} measurements, got {}",
            split,
            problem.measurements.len()
        ));
    }
    if problem.past_controls.len() != split {
        findings.push(format!(
            "expected {} past controls, got {}",
            split,
            problem.past_controls.len()
        ));
    }
    if problem.meas_models.len() != split {
        findings.push(format!(
            "expected {} measurement models, got {}",
            split,
            problem.meas_models.len()
        ));
    }
    for (i, r) in problem.meas_weights.iter().enumerate() {
        if !is_spd(r) {
            findings.push(format!("R[{}] not positive-definite", i + 1));
        }
    }
    for (j, (m, y)) in problem
        .meas_models
        .iter()
        .zip(problem.measurements.iter())
        .enumerate()
    {
        if m.dim_y() != y.len() {
            findings.push(format!("y[{}] does not match measurement model output", j + 1));
        }
        if j < problem.meas_weights.len() && problem.meas_weights[j].nrows() != m.dim_y() {
            findings.push(format!("R[{}] does not match measurement dimension", j + 1));
        }
    }
    if problem.dynamics.len() != t_len {
        findings.push(format!(
            "expected {} transition models, got {}",
            t_len,
            problem.dynamics.len()
        ));
    }
    for (k, d) in problem.dynamics.iter().enumerate() {
        if d.dim_x() != n_x {
            findings.push(format!("dynamics[{k}] state dimension mismatch"));
        }
    }
    if problem.costs.len() != t_len {
        findings.push(format!(
            "expected {} running costs, got {}",
            t_len,
            problem.costs.len()
        ));
    }

    ValidationReport { findings }
}

/// Residuals of an iterate: the disturbances the adversary must have played
/// for the nominal trajectory to be consistent with the models.
pub fn compute_residuals(problem: &StagewiseProblem, iterate: &Iterate) -> Residuals {
    let t_len = problem.horizon;
    let mut w = Vec::with_capacity(t_len + 1);
    w.push(&iterate.x[0] - &problem.xhat0);
    for k in 0..t_len {
        let u = problem.control_at(iterate, k);
        w.push(&iterate.x[k + 1] - problem.dynamics[k].f(&iterate.x[k], u));
    }
    let mut gamma = Vec::with_capacity(problem.split);
    for j in 1..=problem.split {
        gamma.push(&problem.measurements[j - 1] - problem.meas_models[j - 1].h(&iterate.x[j]));
    }
    Residuals { w, gamma }
}

/// Zero-disturbance rollout of the transition models from `x0`.
pub fn rollout(
    problem: &StagewiseProblem,
    x0: &DVector<f64>,
    controls: &[DVector<f64>],
) -> Result<Vec<DVector<f64>>, ProblemError> {
    assert!(controls.len() <= problem.horizon);
    let mut states = Vec::with_capacity(controls.len() + 1);
    states.push(x0.clone());
    for (k, u) in controls.iter().enumerate() {
        let next = problem.dynamics[k].f(&states[k], u);
        if !next.iter().all(|v| v.is_finite()) {
            return Err(ProblemError::Diverged(k + 1));
        }
        states.push(next);
    }
    Ok(states)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Scalar;
    impl Dynamics for Scalar {
        fn dim_x(&self) -> usize {
            1
        }
        fn dim_u(&self) -> usize {
            1
        }
        fn f(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
            DVector::from_element(1, x[0] + u[0])
        }
    }
    struct Doubling;
    impl Dynamics for Doubling {
        fn dim_x(&self) -> usize {
            1
        }
        fn dim_u(&self) -> usize {
            1
        }
        fn f(&self, x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
            DVector::from_element(1, 2.0 * x[0])
        }
    }
    struct ZeroCost;
    impl RunningCost for ZeroCost {
        fn dim_x(&self) -> usize {
            1
        }
        fn dim_u(&self) -> usize {
            1
        }
        fn l(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> f64 {
            0.0
        }
    }
    struct ZeroTerminal;
    impl TerminalCost for ZeroTerminal {
        fn dim_x(&self) -> usize {
            1
        }
        fn l(&self, _x: &DVector<f64>) -> f64 {
            0.0
        }
    }

    fn scalar_problem(split: usize) -> StagewiseProblem {
        let t_len = 1usize;
        StagewiseProblem::new(
            t_len,
            split,
            2.0,
            DVector::zeros(1),
            DMatrix::identity(1, 1),
            vec![DMatrix::identity(1, 1); t_len],
            vec![DMatrix::identity(1, 1); split],
            vec![DVector::zeros(1); split],
            vec![DVector::zeros(1); split],
            vec![Arc::new(Scalar); t_len],
            vec![Arc::new(ZeroCost); t_len],
            (0..split)
                .map(|_| Arc::new(IdMeas) as Arc<dyn Measurement>)
                .collect(),
            Arc::new(ZeroTerminal),
        )
    }

    struct IdMeas;
    impl Measurement for IdMeas {
        fn dim_x(&self) -> usize {
            1
        }
        fn dim_y(&self) -> usize {
            1
        }
        fn h(&self, x: &DVector<f64>) -> DVector<f64> {
            x.clone()
        }
    }

    #[test]
    fn residual_direct_substitution() {
        // f(x,u) = x + u, x = (0, 1), u = (0): w_0 = 0, w_1 = 1.
        let p = scalar_problem(0);
        let it = Iterate {
            x: vec![DVector::zeros(1), DVector::from_element(1, 1.0)],
            u: vec![DVector::zeros(1)],
        };
        let r = compute_residuals(&p, &it);
        assert_eq!(r.w[0][0], 0.0);
        assert_eq!(r.w[1][0], 1.0);
        assert!(r.gamma.is_empty());
    }

    #[test]
    fn rollout_geometric() {
        let mut p = scalar_problem(0);
        p.horizon = 3;
        p.dynamics = vec![Arc::new(Doubling); 3];
        p.costs = vec![Arc::new(ZeroCost); 3];
        p.process_weights = vec![DMatrix::identity(1, 1); 3];
        let states = rollout(
            &p,
            &DVector::from_element(1, 1.0),
            &vec![DVector::zeros(1); 3],
        )
        .unwrap();
        let got: Vec<f64> = states.iter().map(|s| s[0]).collect();
        assert_eq!(got, vec![1.0, 2.0, 4.0, 8.0]);
    }

    #[test]
    fn rollout_residuals_vanish() {
        let p = scalar_problem(1);
        let it = p.rollout_iterate(vec![]).unwrap();
        let r = compute_residuals(&p, &it);
        for w in &r.w {
            assert!(w.amax() < 1e-14);
        }
    }

    #[test]
    fn validate_accepts_consistent_instance() {
        let p = scalar_problem(1);
        assert!(validate(&p).is_valid());
    }

    #[test]
    fn validate_flags_zero_weight() {
        let mut p = scalar_problem(0);
        p.process_weights[0] = DMatrix::zeros(1, 1);
        let report = validate(&p);
        assert!(report.findings.iter().any(|f| f.contains("Q[1] not positive-definite")));
    }

    #[test]
    fn validate_flags_split_violation() {
        let mut p = scalar_problem(0);
        p.split = 2;
        let report = validate(&p);
        assert!(report.findings.iter().any(|f| f.contains("split")));
    }

    #[test]
    fn fd_fallback_matches_linear_jacobian() {
        let d = Scalar;
        let x = DVector::from_element(1, 0.3);
        let u = DVector::from_element(1, -0.7);
        assert!((d.f_x(&x, &u)[(0, 0)] - 1.0).abs() < 1e-8);
        assert!((d.f_u(&x, &u)[(0, 0)] - 1.0).abs() < 1e-8);
    }
}
