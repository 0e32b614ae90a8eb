//! 3x3 singular value decomposition by one-sided Jacobi rotations.

use super::mat3::{self, Mat3, Vec3};
use crate::scalar::Real;

/// `m = u * diag(sigma) * vᵀ` with `sigma` sorted in nonincreasing order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Svd3<T> {
    pub u: Mat3<T>,
    pub sigma: Vec3<T>,
    pub v: Mat3<T>,
}

impl<T: Real> Svd3<T> {
    pub fn reconstruct(&self) -> Mat3<T> {
        let us = mat3::mul(&self.u, &mat3::diag(self.sigma));
        mat3::mul(&us, &mat3::transpose(&self.v))
    }
}

const MAX_SWEEPS: usize = 60;

/// Singular value decomposition of a 3x3 matrix.
///
/// Columns of `a = m * v` are orthogonalized pairwise until every pair is
/// orthogonal to working precision; the column norms are then the singular
/// values and the normalized columns form `u`. Null directions of `u` are
/// completed to an orthonormal basis.
pub fn svd3<T: Real>(m: &Mat3<T>) -> Svd3<T> {
    let mut a = *m;
    let mut v = mat3::identity::<T>();
    let eps = T::epsilon();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for (p, q) in [(0usize, 1usize), (0, 2), (1, 2)] {
            let (mut alpha, mut beta, mut gamma) = (T::zero(), T::zero(), T::zero());
            for row in a.iter() {
                alpha += row[p] * row[p];
                beta += row[q] * row[q];
                gamma += row[p] * row[q];
            }
            if gamma == T::zero() || gamma.abs() <= eps * (alpha * beta).sqrt() {
                continue;
            }
            rotated = true;
            let zeta = (beta - alpha) / (T::lit(2.0) * gamma);
            let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
            let c = T::one() / (T::one() + t * t).sqrt();
            let s = c * t;
            for row in a.iter_mut() {
                let (x, y) = (row[p], row[q]);
                row[p] = c * x - s * y;
                row[q] = s * x + c * y;
            }
            for row in v.iter_mut() {
                let (x, y) = (row[p], row[q]);
                row[p] = c * x - s * y;
                row[q] = s * x + c * y;
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec3<T> = [0, 1, 2].map(|j| mat3::norm(mat3::column(&a, j)));
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap_or(std::cmp::Ordering::Equal));

    let sigma = order.map(|k| norms[k]);
    let mut v_sorted = mat3::zeros::<T>();
    let mut u_cols: [Option<Vec3<T>>; 3] = [None; 3];
    let tiny = sigma[0] * eps * T::lit(16.0);
    for (dst, &src) in order.iter().enumerate() {
        for i in 0..3 {
            v_sorted[i][dst] = v[i][src];
        }
        if sigma[dst] > tiny && sigma[dst] > T::zero() {
            u_cols[dst] = Some(mat3::scale(mat3::column(&a, src), T::one() / sigma[dst]));
        }
    }
    let u_cols = complete_basis(u_cols);
    let mut u = mat3::zeros::<T>();
    for (j, col) in u_cols.iter().enumerate() {
        for i in 0..3 {
            u[i][j] = col[i];
        }
    }
    Svd3 {
        u,
        sigma,
        v: v_sorted,
    }
}

/// Fills missing columns so that the three columns are orthonormal.
fn complete_basis<T: Real>(cols: [Option<Vec3<T>>; 3]) -> [Vec3<T>; 3] {
    let mut out: [Option<Vec3<T>>; 3] = [None; 3];
    let mut basis: Vec<Vec3<T>> = Vec::with_capacity(3);
    // Known columns are orthogonal up to rounding; clean them up first.
    for (slot, c) in out.iter_mut().zip(cols) {
        if let Some(o) = c.and_then(|c| orthonormalize(c, &basis)) {
            basis.push(o);
            *slot = Some(o);
        }
    }
    let (o, z) = (T::one(), T::zero());
    let axes = [[o, z, z], [z, o, z], [z, z, o]];
    for slot in out.iter_mut() {
        if slot.is_none() {
            // Fewer than three basis vectors: some axis keeps >= 1/sqrt(3) outside their span.
            let fill = axes
                .iter()
                .find_map(|a| orthonormalize(*a, &basis))
                .unwrap_or(axes[basis.len()]);
            basis.push(fill);
            *slot = Some(fill);
        }
    }
    out.map(|c| c.unwrap_or([z; 3]))
}

fn orthonormalize<T: Real>(v: Vec3<T>, basis: &[Vec3<T>]) -> Option<Vec3<T>> {
    let mut w = v;
    for b in basis {
        w = mat3::sub(w, mat3::scale(*b, mat3::dot(w, *b)));
    }
    let n = mat3::norm(w);
    if n > T::lit(1e-3) {
        Some(mat3::scale(w, T::one() / n))
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn orth_err(m: &Mat3<f64>) -> f64 {
        mat3::max_abs_diff(&mat3::mul(&mat3::transpose(m), m), &mat3::identity())
    }

    #[test]
    fn identity_has_unit_singular_values() {
        let s = svd3(&mat3::identity::<f64>());
        assert_eq!(s.sigma, [1.0, 1.0, 1.0]);
        assert!(mat3::max_abs_diff(&s.reconstruct(), &mat3::identity()) < 1e-15);
    }

    #[test]
    fn diagonal_input() {
        let s = svd3(&mat3::diag([3.0, 2.0, 1.0]));
        assert_eq!(s.sigma, [3.0, 2.0, 1.0]);
        let s = svd3(&mat3::diag([1.0, 3.0, 2.0]));
        assert_eq!(s.sigma, [3.0, 2.0, 1.0]);
        assert!(mat3::max_abs_diff(&s.reconstruct(), &mat3::diag([1.0, 3.0, 2.0])) < 1e-15);
    }

    #[test]
    fn rank_one_and_zero_matrices_give_orthogonal_factors() {
        let m: [[f64; 3]; 3] = [[1.0, 2.0, 3.0], [2.0, 4.0, 6.0], [-1.0, -2.0, -3.0]];
        let s = svd3(&m);
        assert!(s.sigma[1].abs() < 1e-12 && s.sigma[2].abs() < 1e-12);
        assert!(orth_err(&s.u) < 1e-12);
        assert!(orth_err(&s.v) < 1e-12);
        assert!(mat3::max_abs_diff(&s.reconstruct(), &m) < 1e-12);

        let z = svd3(&mat3::zeros::<f64>());
        assert_eq!(z.sigma, [0.0; 3]);
        assert!(orth_err(&z.u) < 1e-15);
    }

    #[test]
    fn works_in_single_precision() {
        let m: Mat3<f32> = [[2.0, -1.0, 0.5], [0.3, 1.5, -0.7], [1.1, 0.2, 0.9]];
        let s = svd3(&m);
        let r = s.reconstruct();
        assert!(mat3::max_abs_diff(&r, &m) < 1e-5);
    }
}
