//! Singular value decomposition by one-sided Jacobi rotations.
//!
//! Rotations orthogonalize the columns of a working copy `A·V`; on
//! convergence the column norms are the singular values and the normalized
//! columns are the left singular vectors. Wide inputs are handled through
//! their transpose. Left vectors belonging to zero singular values are
//! completed to an orthonormal set by Gram–Schmidt against the standard basis.

use super::matrix::{dot, Matrix};
use crate::error::{Error, Result};

pub const MAX_SWEEPS: usize = 100;
pub const TOLERANCE: f64 = 1e-12;

/// Thin SVD: `U` is m×k, `V` is n×k with k = min(m, n).
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Matrix,
    pub singular_values: Vec<f64>,
    pub v: Matrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        let us = Matrix::from_fn(self.u.rows(), self.u.cols(), |i, j| {
            self.u[(i, j)] * self.singular_values[j]
        });
        us.matmul_t(&self.v)
    }

    pub fn nuclear_norm(&self) -> f64 {
        self.singular_values.iter().sum()
    }
}

pub fn svd(m: &Matrix) -> Result<SvdResult> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::Numeric("svd of an empty matrix".into()));
    }
    if !m.is_finite() {
        return Err(Error::Numeric("svd input has non-finite entries".into()));
    }
    if m.rows() < m.cols() {
        let t = jacobi_tall(&m.transpose())?;
        return Ok(SvdResult {
            u: t.v,
            singular_values: t.singular_values,
            v: t.u,
        });
    }
    jacobi_tall(m)
}

fn jacobi_tall(m: &Matrix) -> Result<SvdResult> {
    let (rows, cols) = m.shape();
    // Column-major working storage keeps the rotations cache friendly.
    let mut a: Vec<Vec<f64>> = (0..cols).map(|j| m.col(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..cols)
        .map(|j| {
            let mut e = vec![0.0; cols];
            e[j] = 1.0;
            e
        })
        .collect();

    let scale = m.frobenius_norm();
    let negligible = (f64::EPSILON * scale * rows.max(cols) as f64).powi(2);
    let mut converged = scale == 0.0;
    let mut sweeps = 0;
    while !converged {
        if sweeps == MAX_SWEEPS {
            return Err(Error::Numeric(format!(
                "one-sided Jacobi did not converge in {MAX_SWEEPS} sweeps"
            )));
        }
        sweeps += 1;
        let mut off = 0.0f64;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let alpha = dot(&a[p], &a[p]);
                let beta = dot(&a[q], &a[q]);
                let gamma = dot(&a[p], &a[q]);
                // A column at roundoff level has a meaningless direction; its
                // normalized correlation with anything never settles.
                if gamma == 0.0 || alpha <= negligible || beta <= negligible {
                    continue;
                }
                let denom = (alpha * beta).sqrt();
                if denom > 0.0 {
                    off = off.max(gamma.abs() / denom);
                }
                if gamma.abs() <= TOLERANCE * denom {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        converged = off <= TOLERANCE;
    }

    let mut sigma: Vec<f64> = a.iter().map(|col| dot(col, col).sqrt()).collect();
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&x, &y| sigma[y].total_cmp(&sigma[x]).then(x.cmp(&y)));

    let cutoff = scale * f64::EPSILON * (rows.max(cols) as f64);
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(cols);
    let mut v_cols: Vec<Vec<f64>> = Vec::with_capacity(cols);
    let mut sorted = Vec::with_capacity(cols);
    for &j in &order {
        let s = sigma[j];
        if s > cutoff {
            u_cols.push(a[j].iter().map(|x| x / s).collect());
        } else {
            u_cols.push(Vec::new());
        }
        v_cols.push(v[j].clone());
        sorted.push(if s > cutoff { s } else { 0.0 });
    }
    complete_basis(&mut u_cols, rows);
    sigma = sorted;

    let u = Matrix::from_fn(rows, cols, |i, j| u_cols[j][i]);
    let v = Matrix::from_fn(cols, cols, |i, j| v_cols[j][i]);
    Ok(SvdResult {
        u,
        singular_values: sigma,
        v,
    })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let cp = &mut left[p];
    let cq = &mut right[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let yq = *y;
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Fills empty columns with unit vectors orthogonal to every filled column.
fn complete_basis(cols: &mut [Vec<f64>], dim: usize) {
    let mut candidate = 0;
    for j in 0..cols.len() {
        if !cols[j].is_empty() {
            continue;
        }
        while candidate < dim {
            let mut e = vec![0.0; dim];
            e[candidate] = 1.0;
            candidate += 1;
            // Two passes of modified Gram–Schmidt.
            for _ in 0..2 {
                for other in cols.iter().filter(|c| !c.is_empty()) {
                    let proj = dot(&e, other);
                    for (x, o) in e.iter_mut().zip(other) {
                        *x -= proj * o;
                    }
                }
            }
            let norm = dot(&e, &e).sqrt();
            if norm > 1e-8 {
                cols[j] = e.into_iter().map(|x| x / norm).collect();
                break;
            }
        }
    }
}

/// Singular-value soft-thresholding: `U · diag(max(σ − t, 0)) · Vᵀ`.
pub fn svt(m: &Matrix, threshold: f64) -> Result<Matrix> {
    if !(threshold >= 0.0) {
        return Err(Error::Config(format!(
            "svt threshold must be non-negative, got {threshold}"
        )));
    }
    let dec = svd(m)?;
    let shrunk: Vec<f64> = dec
        .singular_values
        .iter()
        .map(|s| (s - threshold).max(0.0))
        .collect();
    Ok(SvdResult {
        u: dec.u,
        singular_values: shrunk,
        v: dec.v,
    }
    .reconstruct())
}

pub fn nuclear_norm(m: &Matrix) -> Result<f64> {
    Ok(svd(m)?.nuclear_norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn random(rng: &mut Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.uniform() * 2.0 - 1.0)
    }

    fn orthonormal_cols(m: &Matrix, tol: f64) -> bool {
        m.t_matmul(m).approx_eq(&Matrix::identity(m.cols()), tol)
    }

    #[test]
    fn identity_has_unit_singular_values() {
        let d = svd(&Matrix::identity(3)).unwrap();
        assert_eq!(d.singular_values, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn diagonal_singular_values_are_sorted_absolute_entries() {
        let d = svd(&Matrix::diag(&[3.0, 0.0, 1.0])).unwrap();
        assert_eq!(d.singular_values, vec![3.0, 1.0, 0.0]);
        assert!(orthonormal_cols(&d.u, 1e-12));
        let d = svd(&Matrix::diag(&[-2.0, 5.0])).unwrap();
        assert_eq!(d.singular_values, vec![5.0, 2.0]);
    }

    #[test]
    fn seeded_5x5_reconstructs() {
        let mut rng = Rng::new(5);
        let m = random(&mut rng, 5, 5);
        let d = svd(&m).unwrap();
        let err = d.reconstruct().sub(&m).frobenius_norm() / m.frobenius_norm();
        assert!(err < 1e-8, "relative error {err}");
        assert!(orthonormal_cols(&d.u, 1e-9));
        assert!(orthonormal_cols(&d.v, 1e-9));
    }

    #[test]
    fn rectangular_and_rank_deficient_inputs() {
        let mut rng = Rng::new(11);
        for (r, c) in [(6, 3), (3, 6), (1, 4), (4, 1)] {
            let m = random(&mut rng, r, c);
            let d = svd(&m).unwrap();
            assert!(d.reconstruct().approx_eq(&m, 1e-10));
            assert!(orthonormal_cols(&d.u, 1e-9));
            assert!(orthonormal_cols(&d.v, 1e-9));
        }
        // rank 1, U must still be completed to an orthonormal set
        let x = [1.0, 2.0, -1.0, 0.5];
        let m = Matrix::from_fn(4, 4, |i, j| x[i] * x[j]);
        let d = svd(&m).unwrap();
        assert!(orthonormal_cols(&d.u, 1e-9));
        assert!(d.singular_values[1..].iter().all(|s| *s < 1e-12));
        assert!(d.reconstruct().approx_eq(&m, 1e-10));

        let zero = svd(&Matrix::zeros(3, 3)).unwrap();
        assert_eq!(zero.singular_values, vec![0.0; 3]);
        assert!(orthonormal_cols(&zero.u, 1e-12));
    }

    #[test]
    fn rejects_non_finite_and_empty() {
        let mut m = Matrix::zeros(2, 2);
        m[(0, 1)] = f64::NAN;
        assert!(matches!(svd(&m), Err(Error::Numeric(_))));
        assert!(matches!(svd(&Matrix::zeros(0, 3)), Err(Error::Numeric(_))));
    }

    #[test]
    fn svt_examples() {
        let m = Matrix::diag(&[3.0, 1.0]);
        assert!(svt(&m, 0.0).unwrap().approx_eq(&m, 1e-14));
        assert!(svt(&m, 2.0)
            .unwrap()
            .approx_eq(&Matrix::diag(&[1.0, 0.0]), 1e-14));
        assert!(svt(&m, -1.0).is_err());
    }
}
