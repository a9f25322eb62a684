//! Command-line front end: solves, mu sweeps, closed-loop MPC simulations,
//! derivative/step checks against the dense oracle, and timing benchmarks.
//! All experiments are driven by a strict JSON config; every run echoes the
//! fully-resolved config into the output directory so it can be replayed.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use stagewise::dense_oracle::{assemble, solve_dense};
use stagewise::models::{
    lq_problem, quadrotor_problem, random_smooth_problem, PlanarQuadrotorParams, OBSTACLE_CENTER,
};
use stagewise::mpc_sim::{open_loop_mu_sweep, run_closed_loop, SimConfig};
use stagewise::newton_step::{compute_step, StepOptions};
use stagewise::objective::{eval_j, grad_j, merit};
use stagewise::problem::{Dynamics, Iterate, StagewiseProblem};
use stagewise::solver::{solve, SolverOptions, SolverStatus};

const EXIT_CONFIG: u8 = 1;
const EXIT_DEGENERATE: u8 = 2;
const EXIT_LINE_SEARCH: u8 = 3;
const EXIT_CHECK: u8 = 4;

#[derive(Parser)]
#[command(name = "stagewise", about = "Dynamic game trajectory optimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Path to the JSON config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config and the OUT_DIR env var).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override the seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Thread cap for parallel rollouts (default: available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Solve the configured problem once and write the trajectory.
    Solve,
    /// Open-loop plans across a list of mu values.
    Sweep,
    /// Closed-loop MPC simulation over seeded disturbance rollouts.
    Mpc,
    /// Derivative and stagewise-vs-dense step checks.
    Check,
    /// Wall-clock scaling of the stagewise step across horizons.
    Bench,
}

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

#[derive(Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Config {
    model: ModelConfig,
    #[serde(default)]
    solver: SolverOptions,
    #[serde(default)]
    out_dir: Option<PathBuf>,
    #[serde(default)]
    sweep: SweepConfig,
    #[serde(default)]
    mpc: SimConfig,
    #[serde(default)]
    bench: BenchConfig,
    #[serde(default)]
    check: CheckConfig,
}

/// Flat model description; which fields matter depends on `name`
/// ("quadrotor", "lq" or "random_smooth").
#[derive(Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ModelConfig {
    name: String,
    /// Quadrotor physical constants.
    params: PlanarQuadrotorParams,
    /// Instance seed for the random generators.
    seed: u64,
    n_x: usize,
    n_u: usize,
    n_y: usize,
    horizon: usize,
    /// Current time t: number of stored measurements / past controls.
    split: usize,
    mu: f64,
    /// Only for "random_smooth".
    nonlinearity: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            name: String::new(),
            params: PlanarQuadrotorParams::default(),
            seed: 0,
            n_x: 3,
            n_u: 2,
            n_y: 2,
            horizon: 60,
            split: 0,
            mu: 0.0,
            nonlinearity: 0.3,
        }
    }
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SweepConfig {
    mu_list: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            mu_list: vec![-14.0, -6.0, 0.0, 3.0, 6.0],
        }
    }
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct BenchConfig {
    horizons: Vec<usize>,
    /// Repetitions per horizon; the median is reported.
    reps: usize,
    /// Also time the dense assembled solve for contrast.
    dense: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            horizons: vec![50, 100, 200, 400],
            reps: 25,
            dense: true,
        }
    }
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct CheckConfig {
    tol_step: f64,
    tol_grad: f64,
    tol_descent: f64,
    /// Test hook: perturb the first dynamics Jacobian so the checks must
    /// report a violation.
    corrupt_jacobian: bool,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self {
            tol_step: 1e-8,
            tol_grad: 1e-5,
            tol_descent: 1e-6,
            corrupt_jacobian: false,
        }
    }
}

fn load_config(cli: &Cli) -> Result<Config> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| anyhow!("--config <path> is required"))?;
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let mut config: Config = serde_json::from_str(&text)
        .with_context(|| format!("parsing config {}", path.display()))?;
    if let Some(seed) = cli.seed {
        config.model.seed = seed;
        config.mpc.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.out_dir = Some(out.clone());
    } else if config.out_dir.is_none() {
        if let Ok(dir) = std::env::var("OUT_DIR") {
            config.out_dir = Some(PathBuf::from(dir));
        }
    }
    Ok(config)
}

fn out_dir(config: &Config) -> Result<PathBuf> {
    let dir = config
        .out_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn echo_config(config: &Config, dir: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(config)?;
    std::fs::write(dir.join("config.json"), text + "\n")?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Model construction
// ---------------------------------------------------------------------------

fn build_problem(model: &ModelConfig) -> Result<StagewiseProblem> {
    match model.name.as_str() {
        "quadrotor" => Ok(quadrotor_problem(
            model.params,
            model.mu,
            model.horizon,
            model.split,
        )),
        "lq" => Ok(lq_problem(
            model.seed,
            model.n_x,
            model.n_u,
            model.n_y,
            model.horizon,
            model.split,
            model.mu,
        )),
        "random_smooth" => Ok(random_smooth_problem(
            model.seed,
            model.n_x,
            model.n_u,
            model.n_y,
            model.horizon,
            model.split,
            model.mu,
            model.nonlinearity,
        )),
        "" => bail!("model.name is required (quadrotor | lq | random_smooth)"),
        other => bail!("unknown model name {other:?} (quadrotor | lq | random_smooth)"),
    }
}

/// Zero-disturbance rollout from the prior estimate: gravity-compensating
/// hover controls for the quadrotor, zero controls otherwise.
fn initial_iterate(model: &ModelConfig, problem: &StagewiseProblem) -> Result<Iterate> {
    let n_free = problem.horizon - problem.split;
    let u0 = if model.name == "quadrotor" {
        model.params.hover_control()
    } else {
        DVector::zeros(problem.dim_u())
    };
    Ok(problem.rollout_iterate(vec![u0; n_free])?)
}

fn clearance_reference(model: &ModelConfig) -> (f64, f64) {
    if model.name == "quadrotor" {
        OBSTACLE_CENTER
    } else {
        (0.0, 0.0)
    }
}

// ---------------------------------------------------------------------------
// Output helpers
// ---------------------------------------------------------------------------

fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

fn trajectory_csv(iterate: &Iterate, split: usize) -> String {
    let n_x = iterate.x[0].len();
    let n_u = iterate.u.first().map(|u| u.len()).unwrap_or(0);
    let mut out = String::from("k");
    for i in 0..n_x {
        out.push_str(&format!(",x{i}"));
    }
    for i in 0..n_u {
        out.push_str(&format!(",u{i}"));
    }
    out.push('\n');
    for (k, x) in iterate.x.iter().enumerate() {
        out.push_str(&k.to_string());
        for v in x.iter() {
            out.push(',');
            out.push_str(&fmt(*v));
        }
        // Free controls exist for k = split..horizon-1.
        if k >= split && k - split < iterate.u.len() {
            for v in iterate.u[k - split].iter() {
                out.push(',');
                out.push_str(&fmt(*v));
            }
        } else {
            for _ in 0..n_u {
                out.push(',');
            }
        }
        out.push('\n');
    }
    out
}

fn matrix_csv(m: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| fmt(m[(i, j)])).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

fn vector_csv(v: &DVector<f64>) -> String {
    let mut out = String::new();
    for x in v.iter() {
        out.push_str(&fmt(*x));
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn cmd_solve(config: &Config, quiet: bool) -> Result<u8> {
    let dir = out_dir(config)?;
    echo_config(config, &dir)?;
    let problem = build_problem(&config.model)?;
    let initial = initial_iterate(&config.model, &problem)?;
    let result = solve(&problem, initial, &config.solver)?;
    std::fs::write(
        dir.join("trajectory.csv"),
        trajectory_csv(&result.iterate, problem.split),
    )?;
    std::fs::write(dir.join("trace.csv"), result.trace_csv())?;
    if !quiet {
        println!(
            "status {:?} after {} accepted steps{}",
            result.status,
            result.trace.len(),
            result
                .degeneracy
                .as_deref()
                .map(|d| format!(" ({d})"))
                .unwrap_or_default()
        );
    }
    Ok(match result.status {
        SolverStatus::Converged => 0,
        SolverStatus::Degenerate => EXIT_DEGENERATE,
        SolverStatus::LineSearchFailed | SolverStatus::MaxIters => EXIT_LINE_SEARCH,
    })
}

fn cmd_sweep(config: &Config, quiet: bool) -> Result<u8> {
    let dir = out_dir(config)?;
    echo_config(config, &dir)?;
    let mut model = config.model.clone();
    model.split = 0;
    let template = build_problem(&model)?;
    let initial = initial_iterate(&model, &template)?;
    let entries = open_loop_mu_sweep(
        &template,
        &config.sweep.mu_list,
        &config.solver,
        &initial,
        clearance_reference(&model),
    )?;
    let mut summary = String::from("mu,status,clearance\n");
    let mut any_ok = false;
    for entry in &entries {
        summary.push_str(&format!(
            "{},{:?},{}\n",
            entry.mu,
            entry.status,
            fmt(entry.clearance)
        ));
        let mut path_csv = String::from("k,px,py\n");
        for (k, (px, py)) in entry.path.iter().enumerate() {
            path_csv.push_str(&format!("{k},{},{}\n", fmt(*px), fmt(*py)));
        }
        std::fs::write(dir.join(format!("path_mu_{}.csv", entry.mu)), path_csv)?;
        any_ok |= entry.status == SolverStatus::Converged;
        if !quiet {
            println!(
                "mu {}: {:?}, clearance {:.4}",
                entry.mu, entry.status, entry.clearance
            );
        }
    }
    std::fs::write(dir.join("clearance_summary.csv"), summary)?;
    Ok(if any_ok { 0 } else { EXIT_DEGENERATE })
}

fn cmd_mpc(config: &Config, quiet: bool) -> Result<u8> {
    let dir = out_dir(config)?;
    echo_config(config, &dir)?;
    let mut model = config.model.clone();
    // The closed-loop template carries the full measurement history.
    model.split = model.horizon;
    model.mu = config.mpc.mu;
    let template = build_problem(&model)?;
    let n_free = template.horizon;
    let u0 = if model.name == "quadrotor" {
        model.params.hover_control()
    } else {
        DVector::zeros(template.dim_u())
    };
    let result = run_closed_loop(
        &template,
        &config.mpc,
        &config.solver,
        &vec![u0; n_free],
        clearance_reference(&model),
    );
    std::fs::write(dir.join("timeseries.csv"), result.timeseries_csv())?;
    std::fs::write(dir.join("summary.csv"), result.summary_csv())?;
    if !result.failures.is_empty() {
        let mut report = String::from("rollout,reason\n");
        for (idx, reason) in &result.failures {
            report.push_str(&format!("{idx},{:?}\n", reason));
        }
        std::fs::write(dir.join("failures.csv"), report)?;
    }
    if !quiet {
        println!(
            "{:?} controller: mean clearance {:.5}, avg control std {:.5}, {} of {} rollouts failed",
            config.mpc.controller,
            result.mean_clearance(),
            result.avg_control_std(),
            result.n_failed,
            result.n_rollouts
        );
    }
    Ok(0)
}

/// Delegates every derivative call except `f_x`, which gets a fixed
/// perturbation; used to verify that `check` actually detects wrong
/// Jacobians.
struct CorruptedDynamics {
    inner: Arc<dyn Dynamics>,
}

impl Dynamics for CorruptedDynamics {
    fn dim_x(&self) -> usize {
        self.inner.dim_x()
    }
    fn dim_u(&self) -> usize {
        self.inner.dim_u()
    }
    fn f(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.inner.f(x, u)
    }
    fn f_x(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        let mut j = self.inner.f_x(x, u);
        j[(0, 0)] += 1e-3;
        j
    }
    fn f_u(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        self.inner.f_u(x, u)
    }
    fn f_xx(&self, x: &DVector<f64>, u: &DVector<f64>) -> Vec<DMatrix<f64>> {
        self.inner.f_xx(x, u)
    }
    fn f_xu(&self, x: &DVector<f64>, u: &DVector<f64>) -> Vec<DMatrix<f64>> {
        self.inner.f_xu(x, u)
    }
    fn f_uu(&self, x: &DVector<f64>, u: &DVector<f64>) -> Vec<DMatrix<f64>> {
        self.inner.f_uu(x, u)
    }
    fn has_tensors(&self) -> bool {
        self.inner.has_tensors()
    }
}

fn flatten(iterate: &Iterate) -> Vec<f64> {
    let mut flat = Vec::new();
    for x in iterate.x.iter().chain(iterate.u.iter()) {
        flat.extend(x.iter().copied());
    }
    flat
}

fn unflatten(flat: &[f64], like: &Iterate) -> Iterate {
    let mut out = like.clone();
    let mut pos = 0;
    for x in out.x.iter_mut().chain(out.u.iter_mut()) {
        for v in x.iter_mut() {
            *v = flat[pos];
            pos += 1;
        }
    }
    out
}

#[derive(Serialize)]
struct CheckReport {
    step_rel_error: f64,
    grad_fd_rel_error: f64,
    descent_rel_error: f64,
    grad_sq: f64,
    tolerances: CheckConfig,
    passed: bool,
    worst: String,
}

fn cmd_check(config: &Config, quiet: bool) -> Result<u8> {
    let dir = out_dir(config)?;
    echo_config(config, &dir)?;
    let mut problem = build_problem(&config.model)?;
    if config.check.corrupt_jacobian {
        for d in problem.dynamics.iter_mut() {
            *d = Arc::new(CorruptedDynamics { inner: d.clone() });
        }
    }
    let iterate = initial_iterate(&config.model, &problem)?;

    // Stagewise step vs the dense factorization of the same Newton system.
    let system = assemble(&problem, &iterate, config.solver.gauss_newton)?;
    let p_dense = solve_dense(&system)?;
    let (p_stage, diag) = compute_step(
        &problem,
        &iterate,
        StepOptions {
            gauss_newton: config.solver.gauss_newton,
        },
    )?;
    let mut num: f64 = 0.0;
    let mut den: f64 = 0.0;
    let mut stage_flat = Vec::new();
    let mut dense_flat = Vec::new();
    for (a, b) in p_stage
        .p_x
        .iter()
        .chain(p_stage.p_u.iter())
        .zip(p_dense.p_x.iter().chain(p_dense.p_u.iter()))
    {
        num += (a - b).norm_squared();
        den += b.norm_squared();
        stage_flat.extend(a.iter().copied());
        dense_flat.extend(b.iter().copied());
    }
    let step_rel_error = num.sqrt() / (1.0 + den.sqrt());

    // Analytic gradient vs central finite differences of the objective.
    let grad = grad_j(&problem, &iterate)?;
    let mut grad_flat = Vec::new();
    for g in grad.g_x.iter().chain(grad.g_u.iter()) {
        grad_flat.extend(g.iter().copied());
    }
    let flat = flatten(&iterate);
    let mut grad_fd_rel_error: f64 = 0.0;
    let scale = 1.0 + grad_flat.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    for i in 0..flat.len() {
        let h = 1e-6 * (1.0 + flat[i].abs());
        let mut plus = flat.clone();
        plus[i] += h;
        let mut minus = flat.clone();
        minus[i] -= h;
        let fd = (eval_j(&problem, &unflatten(&plus, &iterate))?
            - eval_j(&problem, &unflatten(&minus, &iterate))?)
            / (2.0 * h);
        grad_fd_rel_error = grad_fd_rel_error.max((grad_flat[i] - fd).abs() / scale);
    }

    // Directional derivative of the merit along the step vs -|grad|^2.
    let grad_sq = diag.grad_sq.unwrap_or_else(|| {
        grad_flat.iter().map(|g| g * g).sum::<f64>()
    });
    let h = 1e-4;
    let merit_at = |alpha: f64| -> Result<f64> {
        let mut trial = iterate.clone();
        trial.step(&p_stage, alpha);
        Ok(merit(&problem, &trial)?)
    };
    let deriv = (8.0 * (merit_at(h)? - merit_at(-h)?)
        - (merit_at(2.0 * h)? - merit_at(-2.0 * h)?))
        / (12.0 * h);
    let descent_rel_error = (deriv + grad_sq).abs() / (1.0 + grad_sq);

    std::fs::write(dir.join("hessian.csv"), matrix_csv(&system.h))?;
    std::fs::write(dir.join("gradient.csv"), vector_csv(&system.g))?;
    std::fs::write(
        dir.join("p_dense.csv"),
        vector_csv(&DVector::from_vec(dense_flat)),
    )?;
    std::fs::write(
        dir.join("p_stagewise.csv"),
        vector_csv(&DVector::from_vec(stage_flat)),
    )?;

    let mut violations = vec![];
    if step_rel_error >= config.check.tol_step {
        violations.push(format!("step mismatch {step_rel_error:.3e}"));
    }
    if grad_fd_rel_error >= config.check.tol_grad {
        violations.push(format!("gradient FD error {grad_fd_rel_error:.3e}"));
    }
    if descent_rel_error >= config.check.tol_descent {
        violations.push(format!("descent identity error {descent_rel_error:.3e}"));
    }
    let report = CheckReport {
        step_rel_error,
        grad_fd_rel_error,
        descent_rel_error,
        grad_sq,
        tolerances: config.check.clone(),
        passed: violations.is_empty(),
        worst: violations.join("; "),
    };
    std::fs::write(
        dir.join("check_report.json"),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    if !quiet {
        println!(
            "step {:.3e}, gradient {:.3e}, descent {:.3e}: {}",
            step_rel_error,
            grad_fd_rel_error,
            descent_rel_error,
            if report.passed { "ok" } else { &report.worst }
        );
    }
    Ok(if report.passed { 0 } else { EXIT_CHECK })
}

fn cmd_bench(config: &Config, quiet: bool) -> Result<u8> {
    let dir = out_dir(config)?;
    echo_config(config, &dir)?;
    let reps = config.bench.reps.max(20);
    let mut csv = String::from("horizon,stagewise_median_ns,dense_median_ns\n");
    let mut ts = Vec::new();
    let mut stage_times = Vec::new();
    let mut dense_times = Vec::new();
    for &horizon in &config.bench.horizons {
        let mut model = config.model.clone();
        model.horizon = horizon;
        model.split = horizon / 2;
        let problem = build_problem(&model)?;
        let iterate = initial_iterate(&model, &problem)?;
        let options = StepOptions {
            gauss_newton: config.solver.gauss_newton,
        };
        compute_step(&problem, &iterate, options)?; // warm-up
        let mut samples = Vec::with_capacity(reps);
        for _ in 0..reps {
            let t0 = Instant::now();
            let _ = compute_step(&problem, &iterate, options)?;
            samples.push(t0.elapsed().as_nanos() as f64);
        }
        samples.sort_by(f64::total_cmp);
        let stage_ns = samples[samples.len() / 2];

        let dense_ns = if config.bench.dense {
            let mut samples = Vec::new();
            for _ in 0..3 {
                let t0 = Instant::now();
                let system = assemble(&problem, &iterate, options.gauss_newton)?;
                let _ = solve_dense(&system)?;
                samples.push(t0.elapsed().as_nanos() as f64);
            }
            samples.sort_by(f64::total_cmp);
            samples[samples.len() / 2]
        } else {
            f64::NAN
        };
        csv.push_str(&format!("{horizon},{stage_ns},{dense_ns}\n"));
        ts.push(horizon as f64);
        stage_times.push(stage_ns);
        dense_times.push(dense_ns);
        if !quiet {
            println!("T = {horizon}: stagewise {stage_ns} ns, dense {dense_ns} ns");
        }
    }
    std::fs::write(dir.join("bench.csv"), csv)?;
    if ts.len() >= 2 {
        let stage_slope = loglog_slope(&ts, &stage_times);
        if !quiet {
            println!("stagewise log-log slope {stage_slope:.3}");
            if config.bench.dense {
                println!("dense log-log slope {:.3}", loglog_slope(&ts, &dense_times));
            }
        }
    }
    Ok(0)
}

fn loglog_slope(ts: &[f64], times: &[f64]) -> f64 {
    let n = ts.len() as f64;
    let xs: Vec<f64> = ts.iter().map(|t| t.ln()).collect();
    let ys: Vec<f64> = times.iter().map(|t| t.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let num: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    num / den
}

fn run(cli: &Cli) -> Result<u8> {
    let config = load_config(cli)?;
    if let Some(threads) = cli.threads {
        // Ignore the error if a pool already exists (repeated calls in-process).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    match cli.command {
        Command::Solve => cmd_solve(&config, cli.quiet),
        Command::Sweep => cmd_sweep(&config, cli.quiet),
        Command::Mpc => cmd_mpc(&config, cli.quiet),
        Command::Check => cmd_check(&config, cli.quiet),
        Command::Bench => cmd_bench(&config, cli.quiet),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            // Solver-side failures carry their own exit codes via Ok(..);
            // anything surfacing as an error here is a config/IO problem.
            ExitCode::from(EXIT_CONFIG)
        }
    }
}
