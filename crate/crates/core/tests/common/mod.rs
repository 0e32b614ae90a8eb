//! Independent reference implementations shared by the integration suites.
#![allow(dead_code)]

use cmha_core::tensor::mat3::{self, Mat3, Vec3};
use cmha_core::{Matrix, RigidTransform, SceneRng};

pub fn random_rotation(rng: &mut SceneRng) -> Mat3<f64> {
    mat3::from_quaternion(rng.unit_quaternion())
}

pub fn random_transform(rng: &mut SceneRng, max_shift: f64) -> RigidTransform<f64> {
    let r = random_rotation(rng);
    let t = [
        rng.range(-max_shift, max_shift),
        rng.range(-max_shift, max_shift),
        rng.range(-max_shift, max_shift),
    ];
    RigidTransform::new(r, t).unwrap()
}

pub fn random_points(rng: &mut SceneRng, n: usize, half_width: f64) -> Vec<Vec3<f64>> {
    (0..n)
        .map(|_| {
            [
                rng.range(-half_width, half_width),
                rng.range(-half_width, half_width),
                rng.range(-half_width, half_width),
            ]
        })
        .collect()
}

pub fn random_matrix(rng: &mut SceneRng, rows: usize, cols: usize, bound: f64) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.range(-bound, bound))
}

pub fn naive_matmul(a: &Matrix<f64>, b: &Matrix<f64>) -> Matrix<f64> {
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut acc = 0.0;
            for k in 0..a.cols() {
                acc += a[(i, k)] * b[(k, j)];
            }
            out[(i, j)] = acc;
        }
    }
    out
}

pub fn naive_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Minimum-cost assignment of every row to a distinct column (rows <= cols),
/// shortest augmenting path with potentials. Returns the column of each row.
pub fn hungarian(cost: &Matrix<f64>) -> Vec<usize> {
    let (n, m) = cost.shape();
    assert!(n <= m, "hungarian needs rows <= cols");
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    // p[j]: row (1-based) assigned to column j; 0 means free
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![usize::MAX; n];
    for j in 1..=m {
        if p[j] != 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

/// Every permutation of `0..n`, for exhaustive checks on tiny instances.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn go(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for k in 0..used.len() {
            if !used[k] {
                used[k] = true;
                prefix.push(k);
                go(prefix, used, out);
                prefix.pop();
                used[k] = false;
            }
        }
    }
    let mut out = Vec::new();
    go(&mut Vec::new(), &mut vec![false; n], &mut out);
    out
}

/// `sum_i w_i |R p_i + t - q_i|^2` with `t` chosen optimally for `R`.
pub fn weighted_residual_best_t(r: &Mat3<f64>, src: &[Vec3<f64>], tgt: &[Vec3<f64>], w: &[f64]) -> f64 {
    let total: f64 = w.iter().sum();
    let mean = |pts: &[Vec3<f64>]| {
        let mut acc = [0.0; 3];
        for (p, &wi) in pts.iter().zip(w) {
            for a in 0..3 {
                acc[a] += wi * p[a];
            }
        }
        acc.map(|x| x / total)
    };
    let (pb, qb) = (mean(src), mean(tgt));
    src.iter()
        .zip(tgt)
        .zip(w)
        .map(|((p, q), &wi)| {
            let rp = mat3::mul_vec(r, mat3::sub(*p, pb));
            wi * mat3::dist_sq(rp, mat3::sub(*q, qb))
        })
        .sum()
}

pub fn weighted_residual(t: &RigidTransform<f64>, src: &[Vec3<f64>], tgt: &[Vec3<f64>], w: &[f64]) -> f64 {
    src.iter()
        .zip(tgt)
        .zip(w)
        .map(|((p, q), &wi)| wi * mat3::dist_sq(t.apply(*p), *q))
        .sum()
}

fn euler_zyz(a: f64, b: f64, c: f64) -> Mat3<f64> {
    let rz = |t: f64| mat3::axis_angle([0.0, 0.0, 1.0], t);
    let ry = mat3::axis_angle([0.0, 1.0, 0.0], b);
    mat3::mul(&mat3::mul(&rz(a), &ry), &rz(c))
}

/// Smallest residual over a ZYZ Euler grid with `step_deg` spacing.
pub fn grid_search_residual(src: &[Vec3<f64>], tgt: &[Vec3<f64>], w: &[f64], step_deg: f64) -> f64 {
    let step = step_deg.to_radians();
    let n_ac = (360.0 / step_deg).round() as usize;
    let n_b = (180.0 / step_deg).round() as usize + 1;
    let mut best = f64::INFINITY;
    for ia in 0..n_ac {
        for ib in 0..n_b {
            for ic in 0..n_ac {
                let r = euler_zyz(ia as f64 * step, ib as f64 * step, ic as f64 * step);
                best = best.min(weighted_residual_best_t(&r, src, tgt, w));
            }
        }
    }
    best
}

/// Rotation angle of `a^T b` in degrees via the unit quaternion of the relative rotation.
pub fn quaternion_angle_deg(a: &Mat3<f64>, b: &Mat3<f64>) -> f64 {
    let r = mat3::mul(&mat3::transpose(a), b);
    // Shepperd's method picks the best-conditioned component.
    let tr = mat3::trace(&r);
    let diag = [r[0][0], r[1][1], r[2][2]];
    let k = (0..3).max_by(|&x, &y| diag[x].total_cmp(&diag[y])).unwrap();
    let q = if tr >= diag[k] {
        let w = 0.5 * (1.0 + tr).sqrt();
        let f = 0.25 / w;
        [w, (r[2][1] - r[1][2]) * f, (r[0][2] - r[2][0]) * f, (r[1][0] - r[0][1]) * f]
    } else {
        let (i, j, l) = (k, (k + 1) % 3, (k + 2) % 3);
        let s = 0.5 * (1.0 + r[i][i] - r[j][j] - r[l][l]).sqrt();
        let f = 0.25 / s;
        let mut q = [0.0; 4];
        q[0] = (r[l][j] - r[j][l]) * f;
        q[1 + i] = s;
        q[1 + j] = (r[j][i] + r[i][j]) * f;
        q[1 + l] = (r[l][i] + r[i][l]) * f;
        q
    };
    let vec = (q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    (2.0 * vec.atan2(q[0].abs())).to_degrees()
}
