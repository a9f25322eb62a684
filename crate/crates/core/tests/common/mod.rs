#![allow(dead_code)]

use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use stagewise::newton_step::NewtonStep;
use stagewise::problem::{Iterate, StagewiseProblem};

/// Zero-disturbance rollout iterate perturbed by Gaussian noise: generic
/// position in the iterate space, away from both stationarity and
/// feasibility.
pub fn random_iterate(problem: &StagewiseProblem, seed: u64, scale: f64) -> Iterate {
    let n_free = problem.horizon - problem.split;
    let n_u = problem.dim_u();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(1));
    let free: Vec<DVector<f64>> = (0..n_free)
        .map(|_| DVector::from_fn(n_u, |_, _| rng.sample::<f64, _>(StandardNormal)) * 0.3)
        .collect();
    let mut it = problem.rollout_iterate(free).expect("rollout");
    for x in it.x.iter_mut() {
        *x += DVector::from_fn(x.len(), |_, _| rng.sample::<f64, _>(StandardNormal)) * scale;
    }
    for u in it.u.iter_mut() {
        *u += DVector::from_fn(u.len(), |_, _| rng.sample::<f64, _>(StandardNormal)) * scale;
    }
    it
}

/// Relative max-norm difference between two steps.
pub fn step_diff(a: &NewtonStep, b: &NewtonStep) -> f64 {
    let mut num: f64 = 0.0;
    let mut den: f64 = 1.0;
    for (pa, pb) in a.p_x.iter().zip(b.p_x.iter()) {
        num = num.max((pa - pb).amax());
        den = den.max(pa.amax());
    }
    for (pa, pb) in a.p_u.iter().zip(b.p_u.iter()) {
        num = num.max((pa - pb).amax());
        den = den.max(pa.amax());
    }
    num / den
}

/// Stack an iterate into one vector (states then free controls).
pub fn flatten(it: &Iterate) -> DVector<f64> {
    let dim: usize = it.x.iter().map(|v| v.len()).sum::<usize>()
        + it.u.iter().map(|v| v.len()).sum::<usize>();
    let mut out = DVector::zeros(dim);
    let mut off = 0;
    for v in it.x.iter().chain(it.u.iter()) {
        out.rows_mut(off, v.len()).copy_from(v);
        off += v.len();
    }
    out
}

/// Inverse of [`flatten`] using `shape` for the block sizes.
pub fn unflatten(flat: &DVector<f64>, shape: &Iterate) -> Iterate {
    let mut out = shape.clone();
    let mut off = 0;
    for v in out.x.iter_mut().chain(out.u.iter_mut()) {
        v.copy_from(&flat.rows(off, v.len()));
        off += v.len();
    }
    out
}

/// Central finite difference of a scalar function of the iterate.
pub fn fd_gradient_of<F>(f: F, at: &Iterate, step: f64) -> DVector<f64>
where
    F: Fn(&Iterate) -> f64,
{
    let flat = flatten(at);
    let n = flat.len();
    let mut g = DVector::zeros(n);
    for i in 0..n {
        let h = step * (1.0 + flat[i].abs());
        let mut plus = flat.clone();
        plus[i] += h;
        let mut minus = flat.clone();
        minus[i] -= h;
        g[i] = (f(&unflatten(&plus, at)) - f(&unflatten(&minus, at))) / (2.0 * h);
    }
    g
}
