//! Built-in benchmark models: a planar quadrotor dodging a soft obstacle,
//! seeded linear-quadratic instances and seeded smooth nonlinear instances
//! for property tests.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::problem::{rollout, Dynamics, Measurement, RunningCost, StagewiseProblem, TerminalCost};

// ---------------------------------------------------------------------------
// Planar quadrotor
// ---------------------------------------------------------------------------

/// Physical and integration parameters of the planar quadrotor.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanarQuadrotorParams {
    /// Mass (kg).
    pub m: f64,
    /// Rotational inertia (kg m^2).
    pub i_rot: f64,
    /// Rotor arm (m).
    pub r: f64,
    /// Gravity (m/s^2).
    pub g: f64,
    /// Discretization step (s).
    pub dt: f64,
    /// RK4 sub-steps per discretization step.
    pub n_steps_rk4: usize,
}

impl Default for PlanarQuadrotorParams {
    fn default() -> Self {
        Self {
            m: 1.0,
            i_rot: 0.1,
            r: 0.15,
            g: 9.81,
            dt: 0.05,
            n_steps_rk4: 1,
        }
    }
}

impl PlanarQuadrotorParams {
    /// Per-rotor thrust that exactly cancels gravity at zero tilt.
    pub fn hover_control(&self) -> DVector<f64> {
        DVector::from_element(2, 0.5 * self.m * self.g)
    }
}

/// State (p_x, p_y, theta, v_x, v_y, omega); controls are the two rotor
/// thrusts.
#[derive(Clone, Copy, Debug)]
pub struct PlanarQuadrotor {
    pub params: PlanarQuadrotorParams,
}

impl PlanarQuadrotor {
    pub fn new(params: PlanarQuadrotorParams) -> Self {
        Self { params }
    }

    /// Continuous-time dynamics xdot(x, u).
    pub fn xdot(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let p = &self.params;
        let theta = x[2];
        let thrust = u[0] + u[1];
        DVector::from_vec(vec![
            x[3],
            x[4],
            x[5],
            -thrust * theta.sin() / p.m,
            thrust * theta.cos() / p.m - p.g,
            p.r * (u[0] - u[1]) / p.i_rot,
        ])
    }

    /// d xdot / dx.
    fn a_mat(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        let p = &self.params;
        let theta = x[2];
        let thrust = u[0] + u[1];
        let mut a = DMatrix::zeros(6, 6);
        a[(0, 3)] = 1.0;
        a[(1, 4)] = 1.0;
        a[(2, 5)] = 1.0;
        a[(3, 2)] = -thrust * theta.cos() / p.m;
        a[(4, 2)] = -thrust * theta.sin() / p.m;
        a
    }

    /// d xdot / du.
    fn b_mat(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let p = &self.params;
        let theta = x[2];
        let mut b = DMatrix::zeros(6, 2);
        b[(3, 0)] = -theta.sin() / p.m;
        b[(3, 1)] = -theta.sin() / p.m;
        b[(4, 0)] = theta.cos() / p.m;
        b[(4, 1)] = theta.cos() / p.m;
        b[(5, 0)] = p.r / p.i_rot;
        b[(5, 1)] = -p.r / p.i_rot;
        b
    }

    /// One RK4 sub-step of length `h`, optionally with the sensitivity
    /// matrices of the sub-step map.
    fn rk4_substep(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        h: f64,
        with_sens: bool,
    ) -> (DVector<f64>, Option<(DMatrix<f64>, DMatrix<f64>)>) {
        let k1 = self.xdot(x, u);
        let x2 = x + &k1 * (h / 2.0);
        let k2 = self.xdot(&x2, u);
        let x3 = x + &k2 * (h / 2.0);
        let k3 = self.xdot(&x3, u);
        let x4 = x + &k3 * h;
        let k4 = self.xdot(&x4, u);
        let next = x + (&k1 + &k2 * 2.0 + &k3 * 2.0 + &k4) * (h / 6.0);
        if !with_sens {
            return (next, None);
        }

        let eye = DMatrix::identity(6, 6);
        let (a1, b1) = (self.a_mat(x, u), self.b_mat(x));
        let (a2, b2) = (self.a_mat(&x2, u), self.b_mat(&x2));
        let (a3, b3) = (self.a_mat(&x3, u), self.b_mat(&x3));
        let (a4, b4) = (self.a_mat(&x4, u), self.b_mat(&x4));

        let dk1 = a1;
        let dk1u = b1;
        let dk2 = &a2 * (&eye + &dk1 * (h / 2.0));
        let dk2u = &a2 * (&dk1u * (h / 2.0)) + b2;
        let dk3 = &a3 * (&eye + &dk2 * (h / 2.0));
        let dk3u = &a3 * (&dk2u * (h / 2.0)) + b3;
        let dk4 = &a4 * (&eye + &dk3 * h);
        let dk4u = &a4 * (&dk3u * h) + b4;

        let fx = &eye + (&dk1 + &dk2 * 2.0 + &dk3 * 2.0 + &dk4) * (h / 6.0);
        let fu = (&dk1u + &dk2u * 2.0 + &dk3u * 2.0 + &dk4u) * (h / 6.0);
        (next, Some((fx, fu)))
    }

    fn integrate(&self, x: &DVector<f64>, u: &DVector<f64>, with_sens: bool) -> (DVector<f64>, Option<(DMatrix<f64>, DMatrix<f64>)>) {
        let n = self.params.n_steps_rk4.max(1);
        let h = self.params.dt / n as f64;
        let mut state = x.clone();
        let mut sens = if with_sens {
            Some((DMatrix::identity(6, 6), DMatrix::zeros(6, 2)))
        } else {
            None
        };
        for _ in 0..n {
            let (next, step_sens) = self.rk4_substep(&state, u, h, with_sens);
            state = next;
            if let (Some((fx_tot, fu_tot)), Some((fx, fu))) = (sens.as_mut(), step_sens) {
                // Chain rule through the composed sub-step maps.
                *fu_tot = &fx * &*fu_tot + fu;
                *fx_tot = &fx * &*fx_tot;
            }
        }
        (state, sens)
    }
}

impl Dynamics for PlanarQuadrotor {
    fn dim_x(&self) -> usize {
        6
    }
    fn dim_u(&self) -> usize {
        2
    }

    fn f(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.integrate(x, u, false).0
    }

    fn f_x(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        self.integrate(x, u, true).1.unwrap().0
    }

    fn f_u(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        self.integrate(x, u, true).1.unwrap().1
    }

    // Second derivatives fall back to finite differences of the analytic
    // Jacobians (trait default); the only nonlinearity is sin/cos.
}

/// Position-and-attitude measurement (p_x, p_y, theta).
#[derive(Clone, Copy, Debug)]
pub struct QuadrotorMeasurement;

impl Measurement for QuadrotorMeasurement {
    fn dim_x(&self) -> usize {
        6
    }
    fn dim_y(&self) -> usize {
        3
    }
    fn h(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(vec![x[0], x[1], x[2]])
    }
    fn h_x(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(3, 6);
        h[(0, 0)] = 1.0;
        h[(1, 1)] = 1.0;
        h[(2, 2)] = 1.0;
        h
    }
    fn h_xx(&self, _x: &DVector<f64>) -> Vec<DMatrix<f64>> {
        vec![DMatrix::zeros(6, 6); 3]
    }
}

/// Center of the soft obstacle in the running cost.
pub const OBSTACLE_CENTER: (f64, f64) = (1.0, -0.1);
/// Goal state used by the tracking terms.
pub fn quadrotor_goal() -> DVector<f64> {
    DVector::from_vec(vec![2.0, 0.0, 0.0, 0.0, 0.0, 0.0])
}

fn tracking_weight() -> DVector<f64> {
    DVector::from_vec(vec![100.0, 100.0, 100.0, 1.0, 1.0, 1.0])
}

/// Soft obstacle bump plus control-effort and state-tracking quadratics.
#[derive(Clone, Debug)]
pub struct QuadrotorRunningCost {
    u_ref: DVector<f64>,
    goal: DVector<f64>,
    track: DVector<f64>,
}

impl QuadrotorRunningCost {
    pub fn new(params: &PlanarQuadrotorParams) -> Self {
        Self {
            u_ref: params.hover_control(),
            goal: quadrotor_goal(),
            track: tracking_weight(),
        }
    }

    fn obstacle(&self, x: &DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>) {
        let dx = x[0] - OBSTACLE_CENTER.0;
        let dy = x[1] - OBSTACLE_CENTER.1;
        let phi = -10.0 * dx * dx - 0.5 * dy * dy;
        let val = 0.3 * phi.exp();
        let mut grad_phi = DVector::zeros(6);
        grad_phi[0] = -20.0 * dx;
        grad_phi[1] = -dy;
        let grad = &grad_phi * val;
        let mut hess = &grad_phi * grad_phi.transpose() * val;
        hess[(0, 0)] += -20.0 * val;
        hess[(1, 1)] += -1.0 * val;
        (val, grad, hess)
    }
}

impl RunningCost for QuadrotorRunningCost {
    fn dim_x(&self) -> usize {
        6
    }
    fn dim_u(&self) -> usize {
        2
    }

    fn l(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let (obst, _, _) = self.obstacle(x);
        let du = u - &self.u_ref;
        let dx = x - &self.goal;
        let track: f64 = dx
            .iter()
            .zip(self.track.iter())
            .map(|(d, w)| w * d * d)
            .sum();
        obst + 0.005 * du.norm_squared() + 0.05 * track
    }

    fn l_x(&self, x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
        let (_, mut g, _) = self.obstacle(x);
        let dx = x - &self.goal;
        for i in 0..6 {
            g[i] += 0.1 * self.track[i] * dx[i];
        }
        g
    }

    fn l_u(&self, _x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        (u - &self.u_ref) * 0.01
    }

    fn l_xx(&self, x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        let (_, _, mut h) = self.obstacle(x);
        for i in 0..6 {
            h[(i, i)] += 0.1 * self.track[i];
        }
        h
    }

    fn l_xu(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(6, 2)
    }

    fn l_uu(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::identity(2, 2) * 0.01
    }
}

/// Terminal tracking cost.
#[derive(Clone, Debug)]
pub struct QuadrotorTerminalCost {
    goal: DVector<f64>,
    track: DVector<f64>,
}

impl QuadrotorTerminalCost {
    pub fn new() -> Self {
        Self {
            goal: quadrotor_goal(),
            track: tracking_weight(),
        }
    }
}

impl Default for QuadrotorTerminalCost {
    fn default() -> Self {
        Self::new()
    }
}

impl TerminalCost for QuadrotorTerminalCost {
    fn dim_x(&self) -> usize {
        6
    }
    fn l(&self, x: &DVector<f64>) -> f64 {
        let dx = x - &self.goal;
        dx.iter()
            .zip(self.track.iter())
            .map(|(d, w)| w * d * d)
            .sum()
    }
    fn l_x(&self, x: &DVector<f64>) -> DVector<f64> {
        let dx = x - &self.goal;
        DVector::from_fn(6, |i, _| 2.0 * self.track[i] * dx[i])
    }
    fn l_xx(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_diagonal(&(&tracking_weight() * 2.0))
    }
}

/// Standard quadrotor noise weights: P_0 = Q = 1e-5 I, R = 1e-4
/// diag(1, 1, 0.01).
pub fn quadrotor_weights() -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let p0 = DMatrix::identity(6, 6) * 1e-5;
    let q = DMatrix::identity(6, 6) * 1e-5;
    let r = DMatrix::from_diagonal(&DVector::from_vec(vec![1e-4, 1e-4, 1e-6]));
    (p0, q, r)
}

/// Quadrotor instance starting at the origin. For `split > 0` the
/// measurement history and past controls are synthesized from the
/// zero-disturbance hover rollout, which keeps the instance self-consistent;
/// real histories (e.g. from a closed-loop simulation) can be substituted
/// before solving.
pub fn quadrotor_problem(
    params: PlanarQuadrotorParams,
    mu: f64,
    horizon: usize,
    split: usize,
) -> StagewiseProblem {
    let dynamics: Arc<dyn Dynamics> = Arc::new(PlanarQuadrotor::new(params));
    let cost: Arc<dyn RunningCost> = Arc::new(QuadrotorRunningCost::new(&params));
    let meas: Arc<dyn Measurement> = Arc::new(QuadrotorMeasurement);
    let (p0, q, r) = quadrotor_weights();

    let xhat0 = DVector::zeros(6);
    let u_hover = params.hover_control();
    let past_controls = vec![u_hover.clone(); split];

    let mut problem = StagewiseProblem::new(
        horizon,
        split,
        mu,
        xhat0.clone(),
        p0,
        vec![q; horizon],
        vec![r; split],
        vec![DVector::zeros(3); split],
        past_controls,
        vec![dynamics; horizon],
        vec![cost; horizon],
        vec![meas; split],
        Arc::new(QuadrotorTerminalCost::new()),
    );
    if split > 0 {
        let states = rollout(&problem, &xhat0, &vec![u_hover; split]).expect("hover rollout");
        for j in 1..=split {
            problem.measurements[j - 1] = problem.meas_models[j - 1].h(&states[j]);
        }
    }
    problem
}

// ---------------------------------------------------------------------------
// Linear-quadratic instances
// ---------------------------------------------------------------------------

/// Linear dynamics x' = A x + B u.
#[derive(Clone, Debug)]
pub struct LinearDynamics {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl Dynamics for LinearDynamics {
    fn dim_x(&self) -> usize {
        self.a.nrows()
    }
    fn dim_u(&self) -> usize {
        self.b.ncols()
    }
    fn f(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u
    }
    fn f_x(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        self.a.clone()
    }
    fn f_u(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        self.b.clone()
    }
    fn f_xx(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> Vec<DMatrix<f64>> {
        let n = self.dim_x();
        vec![DMatrix::zeros(n, n); n]
    }
    fn f_xu(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> Vec<DMatrix<f64>> {
        vec![DMatrix::zeros(self.dim_x(), self.dim_u()); self.dim_x()]
    }
    fn f_uu(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> Vec<DMatrix<f64>> {
        let m = self.dim_u();
        vec![DMatrix::zeros(m, m); self.dim_x()]
    }
}

/// Linear measurement y = C x.
#[derive(Clone, Debug)]
pub struct LinearMeasurement {
    pub c: DMatrix<f64>,
}

impl Measurement for LinearMeasurement {
    fn dim_x(&self) -> usize {
        self.c.ncols()
    }
    fn dim_y(&self) -> usize {
        self.c.nrows()
    }
    fn h(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.c * x
    }
    fn h_x(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.c.clone()
    }
    fn h_xx(&self, _x: &DVector<f64>) -> Vec<DMatrix<f64>> {
        let n = self.dim_x();
        vec![DMatrix::zeros(n, n); self.dim_y()]
    }
}

/// Convex quadratic running cost
/// `1/2 x'Wxx x + x'Wxu u + 1/2 u'Wuu u + qx'x + qu'u`.
#[derive(Clone, Debug)]
pub struct QuadraticCost {
    pub w_xx: DMatrix<f64>,
    pub w_xu: DMatrix<f64>,
    pub w_uu: DMatrix<f64>,
    pub q_x: DVector<f64>,
    pub q_u: DVector<f64>,
}

impl QuadraticCost {
    pub fn zero(n_x: usize, n_u: usize) -> Self {
        Self {
            w_xx: DMatrix::zeros(n_x, n_x),
            w_xu: DMatrix::zeros(n_x, n_u),
            w_uu: DMatrix::zeros(n_u, n_u),
            q_x: DVector::zeros(n_x),
            q_u: DVector::zeros(n_u),
        }
    }
}

impl RunningCost for QuadraticCost {
    fn dim_x(&self) -> usize {
        self.w_xx.nrows()
    }
    fn dim_u(&self) -> usize {
        self.w_uu.nrows()
    }
    fn l(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.w_xx * x))
            + x.dot(&(&self.w_xu * u))
            + 0.5 * u.dot(&(&self.w_uu * u))
            + self.q_x.dot(x)
            + self.q_u.dot(u)
    }
    fn l_x(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.w_xx * x + &self.w_xu * u + &self.q_x
    }
    fn l_u(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.w_xu.transpose() * x + &self.w_uu * u + &self.q_u
    }
    fn l_xx(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        self.w_xx.clone()
    }
    fn l_xu(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        self.w_xu.clone()
    }
    fn l_uu(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        self.w_uu.clone()
    }
}

/// Convex quadratic terminal cost `1/2 x'W x + q'x`.
#[derive(Clone, Debug)]
pub struct QuadraticTerminal {
    pub w: DMatrix<f64>,
    pub q: DVector<f64>,
}

impl QuadraticTerminal {
    pub fn zero(n_x: usize) -> Self {
        Self {
            w: DMatrix::zeros(n_x, n_x),
            q: DVector::zeros(n_x),
        }
    }
}

impl TerminalCost for QuadraticTerminal {
    fn dim_x(&self) -> usize {
        self.w.nrows()
    }
    fn l(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.w * x)) + self.q.dot(x)
    }
    fn l_x(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.w * x + &self.q
    }
    fn l_xx(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.w.clone()
    }
}

fn randn_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn randn_vector(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

/// Random SPD matrix `G G' / n + eps I`.
fn random_spd(rng: &mut ChaCha8Rng, n: usize, eps: f64) -> DMatrix<f64> {
    let g = randn_matrix(rng, n, n);
    &g * g.transpose() / n as f64 + DMatrix::identity(n, n) * eps
}

fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues()
        .iter()
        .map(|c| c.norm())
        .fold(0.0, f64::max)
}

/// Random stable A (spectral radius 0.9), random B and C.
fn random_linear_models(
    rng: &mut ChaCha8Rng,
    n_x: usize,
    n_u: usize,
    n_y: usize,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let mut a = randn_matrix(rng, n_x, n_x);
    let rho = spectral_radius(&a);
    if rho > 0.0 {
        a *= 0.9 / rho;
    }
    let b = randn_matrix(rng, n_x, n_u) * 0.5;
    let c = randn_matrix(rng, n_y, n_x);
    (a, b, c)
}

/// Jointly convex random quadratic stage cost: the full (x, u) Hessian is
/// SPD by construction.
fn random_quadratic_cost(rng: &mut ChaCha8Rng, n_x: usize, n_u: usize) -> QuadraticCost {
    let joint = random_spd(rng, n_x + n_u, 0.5);
    QuadraticCost {
        w_xx: joint.view((0, 0), (n_x, n_x)).into(),
        w_xu: joint.view((0, n_x), (n_x, n_u)).into(),
        w_uu: joint.view((n_x, n_x), (n_u, n_u)).into(),
        q_x: randn_vector(rng, n_x) * 0.3,
        q_u: randn_vector(rng, n_u) * 0.3,
    }
}

/// Simulate the linear system with small injected noise to produce a
/// deterministic, self-consistent measurement history.
fn synth_history(
    rng: &mut ChaCha8Rng,
    dynamics: &dyn Dynamics,
    meas: &dyn Measurement,
    xhat0: &DVector<f64>,
    split: usize,
    n_u: usize,
) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let mut x = xhat0 + randn_vector(rng, xhat0.len()) * 0.05;
    let mut past_controls = Vec::with_capacity(split);
    let mut measurements = Vec::with_capacity(split);
    for _ in 0..split {
        let u = randn_vector(rng, n_u) * 0.2;
        x = dynamics.f(&x, &u) + randn_vector(rng, xhat0.len()) * 0.05;
        measurements.push(meas.h(&x) + randn_vector(rng, meas.dim_y()) * 0.05);
        past_controls.push(u);
    }
    (measurements, past_controls)
}

/// Seeded linear-quadratic instance; exactly quadratic in the stacked
/// trajectory, so one Newton step solves it.
#[allow(clippy::too_many_arguments)]
pub fn lq_problem(
    seed: u64,
    n_x: usize,
    n_u: usize,
    n_y: usize,
    horizon: usize,
    split: usize,
    mu: f64,
) -> StagewiseProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b, c) = random_linear_models(&mut rng, n_x, n_u, n_y);
    let dynamics: Arc<dyn Dynamics> = Arc::new(LinearDynamics { a, b });
    let meas: Arc<dyn Measurement> = Arc::new(LinearMeasurement { c });
    let cost: Arc<dyn RunningCost> = Arc::new(random_quadratic_cost(&mut rng, n_x, n_u));
    let terminal = QuadraticTerminal {
        w: random_spd(&mut rng, n_x, 0.5),
        q: randn_vector(&mut rng, n_x) * 0.3,
    };

    // Small noise weights keep the game well-posed over the mu range the
    // test suites exercise.
    let prior = random_spd(&mut rng, n_x, 0.2) * 0.05;
    let process = random_spd(&mut rng, n_x, 0.2) * 0.05;
    let meas_weight = random_spd(&mut rng, n_y, 0.2) * 0.05;
    let xhat0 = randn_vector(&mut rng, n_x) * 0.3;
    let (measurements, past_controls) =
        synth_history(&mut rng, dynamics.as_ref(), meas.as_ref(), &xhat0, split, n_u);

    StagewiseProblem::new(
        horizon,
        split,
        mu,
        xhat0,
        prior,
        vec![process; horizon],
        vec![meas_weight; split],
        measurements,
        past_controls,
        vec![dynamics; horizon],
        vec![cost; horizon],
        vec![meas; split],
        Arc::new(terminal),
    )
}

// ---------------------------------------------------------------------------
// Smooth random instances
// ---------------------------------------------------------------------------

/// Linear dynamics plus a scaled elementwise sine of a linear form; analytic
/// derivatives through second order.
#[derive(Clone, Debug)]
pub struct SmoothDynamics {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub scale: f64,
}

impl SmoothDynamics {
    fn z(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.p * x + &self.r * u
    }
}

impl Dynamics for SmoothDynamics {
    fn dim_x(&self) -> usize {
        self.a.nrows()
    }
    fn dim_u(&self) -> usize {
        self.b.ncols()
    }
    fn f(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let z = self.z(x, u);
        &self.a * x + &self.b * u + z.map(f64::sin) * self.scale
    }
    fn f_x(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        let z = self.z(x, u);
        let mut jac = self.a.clone();
        for i in 0..self.dim_x() {
            let c = self.scale * z[i].cos();
            for j in 0..self.dim_x() {
                jac[(i, j)] += c * self.p[(i, j)];
            }
        }
        jac
    }
    fn f_u(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        let z = self.z(x, u);
        let mut jac = self.b.clone();
        for i in 0..self.dim_x() {
            let c = self.scale * z[i].cos();
            for j in 0..self.dim_u() {
                jac[(i, j)] += c * self.r[(i, j)];
            }
        }
        jac
    }
    fn f_xx(&self, x: &DVector<f64>, u: &DVector<f64>) -> Vec<DMatrix<f64>> {
        let z = self.z(x, u);
        (0..self.dim_x())
            .map(|i| {
                let s = -self.scale * z[i].sin();
                let pi = self.p.row(i).transpose();
                &pi * pi.transpose() * s
            })
            .collect()
    }
    fn f_xu(&self, x: &DVector<f64>, u: &DVector<f64>) -> Vec<DMatrix<f64>> {
        let z = self.z(x, u);
        (0..self.dim_x())
            .map(|i| {
                let s = -self.scale * z[i].sin();
                let pi = self.p.row(i).transpose();
                let ri = self.r.row(i).transpose();
                &pi * ri.transpose() * s
            })
            .collect()
    }
    fn f_uu(&self, x: &DVector<f64>, u: &DVector<f64>) -> Vec<DMatrix<f64>> {
        let z = self.z(x, u);
        (0..self.dim_x())
            .map(|i| {
                let s = -self.scale * z[i].sin();
                let ri = self.r.row(i).transpose();
                &ri * ri.transpose() * s
            })
            .collect()
    }
}

/// Linear measurement plus scaled quadratic forms; analytic derivatives.
#[derive(Clone, Debug)]
pub struct SmoothMeasurement {
    pub c: DMatrix<f64>,
    /// One symmetric matrix per output.
    pub d: Vec<DMatrix<f64>>,
    pub scale: f64,
}

impl Measurement for SmoothMeasurement {
    fn dim_x(&self) -> usize {
        self.c.ncols()
    }
    fn dim_y(&self) -> usize {
        self.c.nrows()
    }
    fn h(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut y = &self.c * x;
        for (i, d) in self.d.iter().enumerate() {
            y[i] += 0.5 * self.scale * x.dot(&(d * x));
        }
        y
    }
    fn h_x(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut jac = self.c.clone();
        for (i, d) in self.d.iter().enumerate() {
            let g = d * x * self.scale;
            for j in 0..self.dim_x() {
                jac[(i, j)] += g[j];
            }
        }
        jac
    }
    fn h_xx(&self, _x: &DVector<f64>) -> Vec<DMatrix<f64>> {
        self.d.iter().map(|d| d * self.scale).collect()
    }
}

/// Seeded smooth nonlinear instance for property tests. `nonlinearity = 0`
/// reduces to an LQ instance.
#[allow(clippy::too_many_arguments)]
pub fn random_smooth_problem(
    seed: u64,
    n_x: usize,
    n_u: usize,
    n_y: usize,
    horizon: usize,
    split: usize,
    mu: f64,
    nonlinearity: f64,
) -> StagewiseProblem {
    assert!(n_x <= 4, "smooth generator is meant for small instances");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x517e_a7b6);
    let (a, b, c) = random_linear_models(&mut rng, n_x, n_u, n_y);
    let p = randn_matrix(&mut rng, n_x, n_x) * 0.4;
    let r = randn_matrix(&mut rng, n_x, n_u) * 0.4;
    let dynamics: Arc<dyn Dynamics> = Arc::new(SmoothDynamics {
        a,
        b,
        p,
        r,
        scale: nonlinearity,
    });
    let d = (0..n_y)
        .map(|_| {
            let mut m = randn_matrix(&mut rng, n_x, n_x) * 0.4;
            let mt = m.transpose();
            m += mt;
            m * 0.5
        })
        .collect();
    let meas: Arc<dyn Measurement> = Arc::new(SmoothMeasurement {
        c,
        d,
        scale: nonlinearity,
    });
    let cost: Arc<dyn RunningCost> = Arc::new(random_quadratic_cost(&mut rng, n_x, n_u));
    let terminal = QuadraticTerminal {
        w: random_spd(&mut rng, n_x, 0.5),
        q: randn_vector(&mut rng, n_x) * 0.3,
    };

    // Small noise weights keep the game well-posed over the mu range the
    // test suites exercise.
    let prior = random_spd(&mut rng, n_x, 0.2) * 0.05;
    let process = random_spd(&mut rng, n_x, 0.2) * 0.05;
    let meas_weight = random_spd(&mut rng, n_y, 0.2) * 0.05;
    let xhat0 = randn_vector(&mut rng, n_x) * 0.3;
    let (measurements, past_controls) =
        synth_history(&mut rng, dynamics.as_ref(), meas.as_ref(), &xhat0, split, n_u);

    StagewiseProblem::new(
        horizon,
        split,
        mu,
        xhat0,
        prior,
        vec![process; horizon],
        vec![meas_weight; split],
        measurements,
        past_controls,
        vec![dynamics; horizon],
        vec![cost; horizon],
        vec![meas; split],
        Arc::new(terminal),
    )
}
