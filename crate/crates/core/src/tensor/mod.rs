//! Dense row-major matrices and the handful of kernels the pipeline needs.

pub mod mat3;
pub mod svd3;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SceneRng;
use crate::scalar::Real;

pub use mat3::{Mat3, Vec3};
pub use svd3::{svd3, Svd3};

/// Row-major dense matrix.
///
/// Entries are finite except for `-inf` sentinels marking masked similarity
/// scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, T::zero())
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dims(format!(
                "buffer of length {} cannot form a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::dims(format!("row {i} has {} entries, expected {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[T]> + '_ {
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scaled(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    /// Elementwise sum; shapes must agree.
    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::dims(format!(
                "elementwise op on {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Selects rows by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| U::lit(x.as_f64())).collect(),
        }
    }
}

impl<T> std::ops::Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// Standard matrix product `a * b`.
pub fn matmul<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(Error::dims(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut c = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out = &mut c.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik == T::zero() {
                continue;
            }
            for (o, &bkj) in out.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    Ok(c)
}

/// `a * bᵀ` without materializing the transpose.
pub fn matmul_transposed<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.cols {
        return Err(Error::dims(format!(
            "matmul_transposed {}x{} by ({}x{})ᵀ",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    Ok(Matrix::from_fn(a.rows, b.rows, |i, j| {
        a.row(i).iter().zip(b.row(j)).map(|(&x, &y)| x * y).sum()
    }))
}

/// Row vector times matrix: `v * m`.
pub fn vecmat<T: Real>(v: &[T], m: &Matrix<T>) -> Vec<T> {
    debug_assert_eq!(v.len(), m.rows);
    let mut out = vec![T::zero(); m.cols];
    for (k, &vk) in v.iter().enumerate() {
        if vk == T::zero() {
            continue;
        }
        for (o, &mkj) in out.iter_mut().zip(m.row(k)) {
            *o += vk * mkj;
        }
    }
    out
}

/// Row-wise softmax with max subtraction. `-inf` entries map to exactly zero.
pub fn softmax_rows<T: Real>(scores: &Matrix<T>) -> Result<Matrix<T>> {
    let mut out = scores.clone();
    for i in 0..out.rows {
        softmax_in_place(out.row_mut(i)).map_err(|_| Error::FullyMaskedRow(i))?;
    }
    Ok(out)
}

/// Softmax of one row in place; errors when no entry is finite.
pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) -> std::result::Result<(), ()> {
    let max = row
        .iter()
        .copied()
        .filter(|x| x.is_finite())
        .fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        return Err(());
    }
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = if *x == T::neg_infinity() { T::zero() } else { (*x - max).exp() };
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
    Ok(())
}

/// `log(sum(exp(xs)))` with max subtraction; `-inf` if every entry is `-inf`.
pub fn log_sum_exp<T: Real>(xs: impl Iterator<Item = T> + Clone) -> T {
    let max = xs.clone().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<T>().ln()
}

/// The five square projections of one attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSet<T> {
    pub w_q: Matrix<T>,
    pub w_k: Matrix<T>,
    pub w_v: Matrix<T>,
    pub w_g: Matrix<T>,
    pub w_f: Matrix<T>,
    pub seed: u64,
}

impl<T: Real> ProjectionSet<T> {
    pub fn dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn zeros(d: usize) -> Self {
        let z = Matrix::zeros(d, d);
        Self {
            w_q: z.clone(),
            w_k: z.clone(),
            w_v: z.clone(),
            w_g: z.clone(),
            w_f: z,
            seed: 0,
        }
    }

    pub fn matrices(&self) -> [&Matrix<T>; 5] {
        [&self.w_q, &self.w_k, &self.w_v, &self.w_g, &self.w_f]
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.matrices().iter().any(|m| m.shape() != (d, d)) {
            return Err(Error::dims("projection matrices must all be d x d"));
        }
        Ok(())
    }
}

/// Uniform matrix with entries in `[-bound, bound)` drawn from `rng`.
pub fn uniform_matrix<T: Real>(rows: usize, cols: usize, bound: f64, rng: &mut SceneRng) -> Matrix<T> {
    Matrix::from_fn(rows, cols, |_, _| T::lit(rng.range(-bound, bound)))
}

/// Deterministic stand-in for trained projections: entries uniform in `[-1/sqrt(d), 1/sqrt(d)]`.
pub fn init_projections<T: Real>(d: usize, seed: u64) -> Result<ProjectionSet<T>> {
    if d == 0 {
        return Err(Error::invalid("projection dimension must be positive"));
    }
    let bound = 1.0 / (d as f64).sqrt();
    let mut rng = SceneRng::derive(seed, 0x5052_4f4a);
    Ok(ProjectionSet {
        w_q: uniform_matrix(d, d, bound, &mut rng),
        w_k: uniform_matrix(d, d, bound, &mut rng),
        w_v: uniform_matrix(d, d, bound, &mut rng),
        w_g: uniform_matrix(d, d, bound, &mut rng),
        w_f: uniform_matrix(d, d, bound, &mut rng),
        seed,
    })
}

/// Plain-`f64` serialized form of a matrix.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MatrixRecord {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl<T: Real> From<&Matrix<T>> for MatrixRecord {
    fn from(m: &Matrix<T>) -> Self {
        Self {
            rows: m.rows,
            cols: m.cols,
            data: m.data.iter().map(|x| x.as_f64()).collect(),
        }
    }
}

impl MatrixRecord {
    pub fn to_matrix<T: Real>(&self) -> Result<Matrix<T>> {
        Matrix::from_vec(self.rows, self.cols, self.data.iter().map(|&x| T::lit(x)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix<f64> {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn identity_product() {
        let a = m(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], &[7.0, 8.0, 9.5]]);
        assert_eq!(matmul(&Matrix::identity(3), &a).unwrap(), a);
    }

    #[test]
    fn hand_computed_product() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = m(&[&[0.0, 1.0], &[1.0, 0.0]]);
        assert_eq!(matmul(&a, &b).unwrap(), m(&[&[2.0, 1.0], &[4.0, 3.0]]));
    }

    #[test]
    fn product_dimension_mismatch() {
        let a = Matrix::<f64>::zeros(2, 3);
        assert!(matches!(matmul(&a, &a), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn transposed_product_agrees() {
        let mut rng = SceneRng::new(9);
        let a: Matrix<f64> = uniform_matrix(4, 6, 1.0, &mut rng);
        let b: Matrix<f64> = uniform_matrix(5, 6, 1.0, &mut rng);
        let direct = matmul(&a, &b.transpose()).unwrap();
        assert!(matmul_transposed(&a, &b).unwrap().max_abs_diff(&direct) < 1e-15);
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&m(&[&[0.0, 0.0]])).unwrap();
        assert_eq!(s.row(0), &[0.5, 0.5]);

        let s = softmax_rows(&m(&[&[3.7, f64::NEG_INFINITY]])).unwrap();
        assert_eq!(s.row(0), &[1.0, 0.0]);

        let s = softmax_rows(&m(&[&[1.0, 2.0, 3.0]])).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|x| x.exp()).sum();
        for (k, x) in [1.0f64, 2.0, 3.0].iter().enumerate() {
            assert!((s[(0, k)] - x.exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_fully_masked_row() {
        let s = m(&[&[0.0, 1.0], &[f64::NEG_INFINITY, f64::NEG_INFINITY]]);
        assert!(matches!(softmax_rows(&s), Err(Error::FullyMaskedRow(1))));
    }

    #[test]
    fn softmax_large_scores_stay_finite() {
        let s = softmax_rows(&m(&[&[1e4, 1e4 - 1.0, -1e4]])).unwrap();
        assert!(s.is_finite());
        assert!((s.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn projections_are_deterministic() {
        let a = init_projections::<f64>(4, 0).unwrap();
        let b = init_projections::<f64>(4, 0).unwrap();
        let c = init_projections::<f64>(4, 1).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.w_q, c.w_q);
        assert!(init_projections::<f64>(0, 0).is_err());
    }

    #[test]
    fn log_sum_exp_matches_direct() {
        let xs = [0.1f64, -2.0, 3.5];
        let direct = xs.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(xs.iter().copied()) - direct).abs() < 1e-14);
        assert_eq!(log_sum_exp([f64::NEG_INFINITY; 2].iter().copied()), f64::NEG_INFINITY);
    }
}
