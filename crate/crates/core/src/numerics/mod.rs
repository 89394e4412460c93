//! Dense linear algebra and stochastic kernels shared by every other module.

mod matrix;
mod rng;
mod svd;

pub use matrix::{dot, Matrix};
pub use rng::{mix_seed, Rng};
pub use svd::{nuclear_norm, svd, svt, SvdResult, MAX_SWEEPS, TOLERANCE};

/// Logistic function; evaluated on the non-positive side to avoid overflow.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// `ln(p / (1 − p))`.
pub fn logit(p: f64) -> f64 {
    p.ln() - (1.0 - p).ln()
}

pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Central-difference gradient of `f` at `at`, one coordinate at a time.
pub fn finite_diff_grad(f: impl Fn(&Matrix) -> f64, at: &Matrix, h: f64) -> Matrix {
    assert!(h > 0.0, "finite difference step must be positive");
    let mut probe = at.clone();
    let mut grad = Matrix::zeros(at.rows(), at.cols());
    for i in 0..at.rows() {
        for j in 0..at.cols() {
            let x = at[(i, j)];
            probe[(i, j)] = x + h;
            let up = f(&probe);
            probe[(i, j)] = x - h;
            let down = f(&probe);
            probe[(i, j)] = x;
            grad[(i, j)] = (up - down) / (2.0 * h);
        }
    }
    grad
}
