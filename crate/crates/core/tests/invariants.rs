//! Property tests: merit nonnegativity, residual affinity on linear models,
//! and bit-level determinism of the whole pipeline.

mod common;

use common::random_iterate;
use nalgebra::DVector;
use proptest::prelude::*;
use stagewise::models::{lq_problem, random_smooth_problem};
use stagewise::newton_step::{compute_step, StepOptions};
use stagewise::objective::merit;
use stagewise::problem::{compute_residuals, validate};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn merit_is_nonnegative(seed in 0u64..500, scale in 0.0f64..0.5) {
        let problem = random_smooth_problem(seed, 3, 2, 2, 5, 2, 0.3, 0.3);
        let it = random_iterate(&problem, seed, scale);
        let m = merit(&problem, &it).unwrap();
        prop_assert!(m >= 0.0 && m.is_finite());
    }

    #[test]
    fn residuals_are_affine_on_linear_models(seed in 0u64..500, shift in -2.0f64..2.0) {
        let problem = lq_problem(seed, 3, 2, 2, 5, 2, 0.3);
        let base = random_iterate(&problem, seed, 0.2);
        let mut other = base.clone();
        for x in other.x.iter_mut() {
            *x += DVector::from_element(x.len(), shift);
        }

        // Perturb both iterates by the same direction: the residual change
        // must not depend on the base point when f and h are linear.
        let mut base_p = base.clone();
        let mut other_p = other.clone();
        let dir = random_iterate(&problem, seed ^ 0xdead, 0.3);
        for (x, d) in base_p.x.iter_mut().zip(dir.x.iter()) {
            *x += d;
        }
        for (x, d) in other_p.x.iter_mut().zip(dir.x.iter()) {
            *x += d;
        }

        let d_base = diff(&compute_residuals(&problem, &base_p), &compute_residuals(&problem, &base));
        let d_other = diff(&compute_residuals(&problem, &other_p), &compute_residuals(&problem, &other));
        for (a, b) in d_base.iter().zip(d_other.iter()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn generators_validate(seed in 0u64..200) {
        let p1 = lq_problem(seed, 3, 2, 2, 6, 3, 0.3);
        prop_assert!(validate(&p1).is_valid());
        let p2 = random_smooth_problem(seed, 3, 2, 2, 6, 3, 0.3, 0.2);
        prop_assert!(validate(&p2).is_valid());
    }

    #[test]
    fn newton_step_is_deterministic(seed in 0u64..100) {
        let problem = random_smooth_problem(seed, 3, 2, 2, 5, 2, 0.3, 0.2);
        let it = random_iterate(&problem, seed, 0.05);
        let a = compute_step(&problem, &it, StepOptions::default());
        let b = compute_step(&problem, &it, StepOptions::default());
        match (a, b) {
            (Ok((sa, _)), Ok((sb, _))) => {
                for (x, y) in sa.p_x.iter().zip(sb.p_x.iter()) {
                    prop_assert_eq!(x, y);
                }
                for (x, y) in sa.p_u.iter().zip(sb.p_u.iter()) {
                    prop_assert_eq!(x, y);
                }
            }
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "determinism violated in error path"),
        }
    }
}

fn diff(a: &stagewise::problem::Residuals, b: &stagewise::problem::Residuals) -> Vec<f64> {
    let mut out = Vec::new();
    for (x, y) in a.w.iter().zip(b.w.iter()) {
        out.extend((x - y).iter().copied());
    }
    for (x, y) in a.gamma.iter().zip(b.gamma.iter()) {
        out.extend((x - y).iter().copied());
    }
    out
}
