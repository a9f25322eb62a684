//! Closed-loop Monte-Carlo simulation and the open-loop mu sweep.
//!
//! The closed-loop scheme keeps the full horizon T fixed while the
//! measurement split grows with simulation time: at sim step k the solve
//! covers the whole window with measurement history y_{1:k} and the applied
//! controls u_{0:k-1}, and the first free control is applied to the truth.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::problem::{Iterate, StagewiseProblem};
use crate::solver::{solve, SolverOptions, SolverStatus};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Controller {
    /// Solves the coupled game with the configured mu.
    Game,
    /// Certainty-equivalent baseline: mu forced to zero.
    Neutral,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n_rollouts: usize,
    pub mu: f64,
    pub seed: u64,
    pub controller: Controller,
    /// Scales the sampled disturbances; 1.0 draws from the problem weights
    /// taken as covariances.
    pub noise_scale: f64,
    /// Restart each solve from the zero-disturbance rollout instead of the
    /// shifted previous solution.
    pub cold_start: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_rollouts: 1000,
            mu: 6.0,
            seed: 0,
            controller: Controller::Game,
            noise_scale: 1.0,
            cold_start: false,
        }
    }
}

/// One simulated rollout of the closed loop.
#[derive(Clone, Debug)]
pub struct RolloutOutcome {
    /// True states x_0..x_T.
    pub states: Vec<DVector<f64>>,
    /// Applied controls u_0..u_{T-1}.
    pub controls: Vec<DVector<f64>>,
    /// Realized running + terminal cost along the true trajectory.
    pub cost: f64,
    /// Minimum distance of (x[0], x[1]) to the reference point over time.
    pub clearance: f64,
    pub failed: bool,
    pub fail_reason: Option<String>,
}

/// Numerically stable per-component mean/variance accumulator.
#[derive(Clone, Debug)]
struct RunningStats {
    count: usize,
    mean: DVector<f64>,
    m2: DVector<f64>,
}

impl RunningStats {
    fn new(dim: usize) -> Self {
        Self {
            count: 0,
            mean: DVector::zeros(dim),
            m2: DVector::zeros(dim),
        }
    }

    fn push(&mut self, v: &DVector<f64>) {
        self.count += 1;
        for i in 0..v.len() {
            let delta = v[i] - self.mean[i];
            self.mean[i] += delta / self.count as f64;
            self.m2[i] += delta * (v[i] - self.mean[i]);
        }
    }

    fn std(&self) -> DVector<f64> {
        if self.count < 2 {
            return DVector::zeros(self.mean.len());
        }
        self.m2.map(|m| (m / (self.count - 1) as f64).sqrt())
    }
}

/// Aggregated simulation output.
#[derive(Clone, Debug)]
pub struct SimResult {
    pub mean_state: Vec<DVector<f64>>,
    pub std_state: Vec<DVector<f64>>,
    pub mean_control: Vec<DVector<f64>>,
    pub std_control: Vec<DVector<f64>>,
    pub costs: Vec<f64>,
    pub clearances: Vec<f64>,
    pub n_failed: usize,
    pub n_rollouts: usize,
    /// One entry per failed rollout: (rollout index, reason).
    pub failures: Vec<(usize, String)>,
}

impl SimResult {
    pub fn mean_cost(&self) -> f64 {
        mean(&self.costs)
    }

    pub fn mean_clearance(&self) -> f64 {
        mean(&self.clearances)
    }

    /// Time-averaged per-component control standard deviation.
    pub fn avg_control_std(&self) -> f64 {
        if self.std_control.is_empty() {
            return 0.0;
        }
        let total: f64 = self.std_control.iter().map(|s| s.mean()).sum();
        total / self.std_control.len() as f64
    }

    /// Per-timestep mean/std CSV (k, then mean/std per state and control
    /// component).
    pub fn timeseries_csv(&self) -> String {
        let n_x = self.mean_state.first().map_or(0, |v| v.len());
        let n_u = self.mean_control.first().map_or(0, |v| v.len());
        let mut out = String::from("k");
        for i in 0..n_x {
            out.push_str(&format!(",mean_x{i},std_x{i}"));
        }
        for i in 0..n_u {
            out.push_str(&format!(",mean_u{i},std_u{i}"));
        }
        out.push('\n');
        for k in 0..self.mean_state.len() {
            out.push_str(&k.to_string());
            for i in 0..n_x {
                out.push_str(&format!(
                    ",{:.16e},{:.16e}",
                    self.mean_state[k][i], self.std_state[k][i]
                ));
            }
            for i in 0..n_u {
                if k < self.mean_control.len() {
                    out.push_str(&format!(
                        ",{:.16e},{:.16e}",
                        self.mean_control[k][i], self.std_control[k][i]
                    ));
                } else {
                    out.push_str(",,");
                }
            }
            out.push('\n');
        }
        out
    }

    /// Per-rollout summary CSV.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("rollout,cost,clearance\n");
        for (i, (c, cl)) in self.costs.iter().zip(self.clearances.iter()).enumerate() {
            out.push_str(&format!("{i},{c:.16e},{cl:.16e}\n"));
        }
        out
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Minimum distance from `reference` to the piecewise-linear path through
/// the planned positions. Interpolating between knots avoids the sampling
/// artifact where a fast crossing straddles the closest point: the discrete
/// minimum then measures knot phasing instead of the geometry of the plan.
pub fn path_clearance(states: &[DVector<f64>], reference: (f64, f64)) -> f64 {
    let (cx, cy) = reference;
    let mut best = f64::INFINITY;
    for w in states.windows(2) {
        let (ax, ay) = (w[0][0], w[0][1]);
        let (dx, dy) = (w[1][0] - ax, w[1][1] - ay);
        let len2 = dx * dx + dy * dy;
        let t = if len2 > 0.0 {
            (((cx - ax) * dx + (cy - ay) * dy) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let (px, py) = (ax + t * dx, ay + t * dy);
        best = best.min(((px - cx).powi(2) + (py - cy).powi(2)).sqrt());
    }
    if states.len() == 1 {
        best = ((states[0][0] - cx).powi(2) + (states[0][1] - cy).powi(2)).sqrt();
    }
    best
}

/// Gaussian sample with covariance `cov` (scaled by `scale^2`).
fn sample_gaussian(rng: &mut ChaCha8Rng, chol_l: &DMatrix<f64>, scale: f64) -> DVector<f64> {
    let z = DVector::from_fn(chol_l.nrows(), |_, _| rng.sample::<f64, _>(StandardNormal));
    chol_l * z * scale
}

/// Sub-problem with history length `split`, carved out of a full-history
/// template (`template.split == template.horizon`).
fn problem_with_history(
    template: &StagewiseProblem,
    mu: f64,
    split: usize,
    measurements: &[DVector<f64>],
    past_controls: &[DVector<f64>],
) -> StagewiseProblem {
    StagewiseProblem::new(
        template.horizon,
        split,
        mu,
        template.xhat0.clone(),
        template.prior_weight.clone(),
        template.process_weights.clone(),
        template.meas_weights[..split].to_vec(),
        measurements.to_vec(),
        past_controls.to_vec(),
        template.dynamics.clone(),
        template.costs.clone(),
        template.meas_models[..split].to_vec(),
        template.terminal_cost.clone(),
    )
}

fn simulate_rollout(
    template: &StagewiseProblem,
    config: &SimConfig,
    options: &SolverOptions,
    initial_controls: &[DVector<f64>],
    clearance_ref: (f64, f64),
    rollout_idx: u64,
) -> RolloutOutcome {
    let t_len = template.horizon;
    let mu = match config.controller {
        Controller::Game => config.mu,
        Controller::Neutral => 0.0,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(rollout_idx + 1);

    let chol_p = Cholesky::new(template.prior_weight.clone())
        .expect("prior weight SPD")
        .l();
    let chol_q: Vec<DMatrix<f64>> = template
        .process_weights
        .iter()
        .map(|q| Cholesky::new(q.clone()).expect("process weight SPD").l())
        .collect();
    let chol_r: Vec<DMatrix<f64>> = template
        .meas_weights
        .iter()
        .map(|r| Cholesky::new(r.clone()).expect("measurement weight SPD").l())
        .collect();

    let fail = |states: Vec<DVector<f64>>, controls: Vec<DVector<f64>>, reason: String| {
        RolloutOutcome {
            states,
            controls,
            cost: f64::NAN,
            clearance: f64::NAN,
            failed: true,
            fail_reason: Some(reason),
        }
    };

    let mut x_true = &template.xhat0 + sample_gaussian(&mut rng, &chol_p, config.noise_scale);
    let mut true_states = vec![x_true.clone()];
    let mut applied = Vec::with_capacity(t_len);
    let mut measurements: Vec<DVector<f64>> = Vec::with_capacity(t_len);
    let mut warm: Option<Iterate> = None;

    for k in 0..t_len {
        let problem = problem_with_history(template, mu, k, &measurements, &applied);
        let initial = if config.cold_start || warm.is_none() {
            match problem.rollout_iterate(initial_controls[k..].to_vec()) {
                Ok(it) => it,
                Err(e) => return fail(true_states, applied, format!("initial rollout: {e}")),
            }
        } else {
            warm.take().unwrap()
        };
        let mut result = match solve(&problem, initial, options) {
            Ok(r) => r,
            Err(e) => return fail(true_states, applied, format!("solver error at step {k}: {e}")),
        };
        // A Gauss-Newton direction can stop being a merit descent direction
        // close to the solution once residual-weighted curvature matters;
        // polish such stalls with exact second derivatives from the stalled
        // iterate, which by then is near enough for full Newton to be safe.
        if result.status == SolverStatus::LineSearchFailed && options.gauss_newton {
            let full = SolverOptions {
                gauss_newton: false,
                ..*options
            };
            result = match solve(&problem, result.iterate, &full) {
                Ok(r) => r,
                Err(e) => {
                    return fail(true_states, applied, format!("solver error at step {k}: {e}"))
                }
            };
        }
        match result.status {
            SolverStatus::Converged | SolverStatus::MaxIters => {}
            s => {
                let tail: Vec<String> = result
                    .trace
                    .iter()
                    .rev()
                    .take(3)
                    .map(|r| format!("m={:.3e} g2={:.3e} a={:.1e}", r.merit, r.grad_sq, r.alpha))
                    .collect();
                return fail(
                    true_states,
                    applied,
                    format!("solver status {s:?} at step {k} [{}]", tail.join("; ")),
                );
            }
        }
        let u_k = result.iterate.u[0].clone();

        // Shifted warm start for the next, one-measurement-longer problem:
        // same state trajectory, first free control becomes history.
        if !config.cold_start {
            warm = Some(Iterate {
                x: result.iterate.x.clone(),
                u: result.iterate.u[1..].to_vec(),
            });
        }

        let w = sample_gaussian(&mut rng, &chol_q[k], config.noise_scale);
        x_true = template.dynamics[k].f(&x_true, &u_k) + w;
        if !x_true.iter().all(|v| v.is_finite()) {
            return fail(true_states, applied, format!("true state diverged at step {k}"));
        }
        let gamma = sample_gaussian(&mut rng, &chol_r[k], config.noise_scale);
        measurements.push(template.meas_models[k].h(&x_true) + gamma);

        true_states.push(x_true.clone());
        applied.push(u_k);
    }

    let mut cost = 0.0;
    for k in 0..t_len {
        cost += template.costs[k].l(&true_states[k], &applied[k]);
    }
    cost += template.terminal_cost.l(&true_states[t_len]);

    RolloutOutcome {
        clearance: path_clearance(&true_states, clearance_ref),
        states: true_states,
        controls: applied,
        cost,
        failed: false,
        fail_reason: None,
    }
}

/// Run the closed loop over `config.n_rollouts` independent disturbance
/// draws. `template` must carry the full measurement stack
/// (`split == horizon`); `initial_controls` seeds the very first solve.
/// Statistics exclude failed rollouts; the failure count is reported.
pub fn run_closed_loop(
    template: &StagewiseProblem,
    config: &SimConfig,
    options: &SolverOptions,
    initial_controls: &[DVector<f64>],
    clearance_ref: (f64, f64),
) -> SimResult {
    assert_eq!(
        template.split, template.horizon,
        "closed-loop template must carry measurement models/weights for every step"
    );
    assert_eq!(initial_controls.len(), template.horizon);

    let run = |i: usize| {
        simulate_rollout(
            template,
            config,
            options,
            initial_controls,
            clearance_ref,
            i as u64,
        )
    };

    #[cfg(feature = "parallel")]
    let outcomes: Vec<RolloutOutcome> = (0..config.n_rollouts).into_par_iter().map(run).collect();
    #[cfg(not(feature = "parallel"))]
    let outcomes: Vec<RolloutOutcome> = (0..config.n_rollouts).map(run).collect();

    aggregate(template, outcomes)
}

/// Merge rollout outcomes in fixed index order so results are independent
/// of scheduling.
fn aggregate(template: &StagewiseProblem, outcomes: Vec<RolloutOutcome>) -> SimResult {
    let t_len = template.horizon;
    let n_x = template.dim_x();
    let n_u = template.dim_u();
    let mut state_stats = vec![RunningStats::new(n_x); t_len + 1];
    let mut control_stats = vec![RunningStats::new(n_u); t_len];
    let mut costs = Vec::new();
    let mut clearances = Vec::new();
    let mut n_failed = 0;
    let mut failures = Vec::new();
    let n_rollouts = outcomes.len();

    for (i, outcome) in outcomes.iter().enumerate() {
        if outcome.failed {
            n_failed += 1;
            failures.push((
                i,
                outcome.fail_reason.clone().unwrap_or_else(|| "unknown".into()),
            ));
            continue;
        }
        for (k, x) in outcome.states.iter().enumerate() {
            state_stats[k].push(x);
        }
        for (k, u) in outcome.controls.iter().enumerate() {
            control_stats[k].push(u);
        }
        costs.push(outcome.cost);
        clearances.push(outcome.clearance);
    }

    SimResult {
        mean_state: state_stats.iter().map(|s| s.mean.clone()).collect(),
        std_state: state_stats.iter().map(|s| s.std()).collect(),
        mean_control: control_stats.iter().map(|s| s.mean.clone()).collect(),
        std_control: control_stats.iter().map(|s| s.std()).collect(),
        costs,
        clearances,
        n_failed,
        n_rollouts,
        failures,
    }
}

/// One entry of the open-loop mu sweep.
#[derive(Clone, Debug)]
pub struct SweepEntry {
    pub mu: f64,
    pub status: SolverStatus,
    /// Planned (x[0], x[1]) path when the solve finished.
    pub path: Vec<(f64, f64)>,
    pub clearance: f64,
}

/// Solve the t = 0 planning problem for each mu. Degenerate entries are
/// reported and the sweep continues.
pub fn open_loop_mu_sweep(
    template: &StagewiseProblem,
    mu_list: &[f64],
    options: &SolverOptions,
    initial: &Iterate,
    clearance_ref: (f64, f64),
) -> Result<Vec<SweepEntry>, crate::solver::SolverError> {
    assert_eq!(template.split, 0, "mu sweep plans from t = 0");
    let mut entries = Vec::with_capacity(mu_list.len());
    for &mu in mu_list {
        let mut problem = template.clone();
        problem.mu = mu;
        let result = solve(&problem, initial.clone(), options)?;
        let path: Vec<(f64, f64)> = result.iterate.x.iter().map(|x| (x[0], x[1])).collect();
        let clearance = path_clearance(&result.iterate.x, clearance_ref);
        entries.push(SweepEntry {
            mu,
            status: result.status,
            path,
            clearance,
        });
    }
    Ok(entries)
}
