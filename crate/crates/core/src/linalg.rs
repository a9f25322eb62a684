//! Small shared linear algebra helpers.

use nalgebra::{Cholesky, DMatrix, DVector};

/// Symmetrize in place, `(a + a^T) / 2`.
pub fn symmetrize(a: &mut DMatrix<f64>) {
    let at = a.transpose();
    *a += at;
    *a *= 0.5;
}

pub fn is_spd(a: &DMatrix<f64>) -> bool {
    if a.nrows() != a.ncols() {
        return false;
    }
    let asym = (a - a.transpose()).amax();
    let scale = 1.0 + a.amax();
    if asym > 1e-8 * scale {
        return false;
    }
    Cholesky::new(a.clone()).is_some()
}

/// Cholesky factor of an SPD matrix, used to apply its inverse without
/// forming it explicitly.
#[derive(Clone)]
pub struct SpdFactor {
    chol: Cholesky<f64, nalgebra::Dyn>,
}

impl SpdFactor {
    pub fn new(a: &DMatrix<f64>) -> Option<Self> {
        Cholesky::new(a.clone()).map(|chol| Self { chol })
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    /// Explicit inverse; only used where a formula needs the matrix itself.
    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }
}

/// Quadratic form `x^T A^{-1} x` through the Cholesky factor of `A`.
pub fn inv_quad(f: &SpdFactor, x: &DVector<f64>) -> f64 {
    x.dot(&f.solve_vec(x))
}
