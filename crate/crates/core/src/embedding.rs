//! Rigid-invariant pairwise geometric embeddings (distance and triplet angle)
//! and absolute sinusoidal position embeddings.
//!
//! Pair embeddings are stored flat: the `d` channels for pair `(i, j)` live in
//! row `i * n + j`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SceneRng;
use crate::scalar::Real;
use crate::tensor::mat3::{self, Vec3};
use crate::tensor::{uniform_matrix, vecmat, Matrix, MatrixRecord};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    /// Channel count; even.
    pub d: usize,
    /// Distance scale in meters.
    pub sigma_d: f64,
    /// Angle scale in radians.
    pub sigma_alpha: f64,
    /// Number of neighbor anchors per pair for triplet angles.
    pub k_anchors: usize,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            d: 24,
            sigma_d: 0.2,
            sigma_alpha: 15f64.to_radians(),
            k_anchors: 3,
        }
    }
}

impl EmbeddingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d % 2 != 0 {
            return Err(Error::invalid(format!("embedding dimension {} must be even and positive", self.d)));
        }
        if !(self.sigma_d > 0.0) || !(self.sigma_alpha > 0.0) {
            return Err(Error::invalid("embedding scales must be positive"));
        }
        if self.k_anchors == 0 {
            return Err(Error::invalid("k_anchors must be at least 1"));
        }
        Ok(())
    }
}

/// `n x n` grid of `d`-channel vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct PairEmbedding<T> {
    n: usize,
    values: Matrix<T>,
}

impl<T: Real> PairEmbedding<T> {
    pub fn from_matrix(n: usize, values: Matrix<T>) -> Result<Self> {
        if values.rows() != n * n {
            return Err(Error::dims(format!("{} rows for a {n}x{n} pair embedding", values.rows())));
        }
        Ok(Self { n, values })
    }

    pub fn zeros(n: usize, d: usize) -> Self {
        Self {
            n,
            values: Matrix::zeros(n * n, d),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> &[T] {
        self.values.row(i * self.n + j)
    }

    pub fn values(&self) -> &Matrix<T> {
        &self.values
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.values.max_abs_diff(&other.values)
    }

    /// Embedding with points reordered: entry `(a, b)` of the result is entry `(perm[a], perm[b])`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.n;
        let mut rows = Vec::with_capacity(n * n);
        for &pa in perm {
            for &pb in perm {
                rows.push(pa * n + pb);
            }
        }
        Self {
            n,
            values: self.values.select_rows(&rows),
        }
    }
}

/// Writes the standard sin/cos ladder: channel `2m` is `sin(x / 10000^(2m/d))`,
/// channel `2m+1` the matching cosine.
pub fn sinusoid<T: Real>(x: T, out: &mut [T]) {
    let d = out.len();
    let base = T::lit(10000.0);
    for m in 0..d / 2 {
        let freq = base.powf(T::lit((2 * m) as f64 / d as f64));
        let (s, c) = (x / freq).sin_cos();
        out[2 * m] = s;
        out[2 * m + 1] = c;
    }
}

/// Learnable maps of the geometric embedding, initialized uniformly in `[-1/sqrt(d), 1/sqrt(d)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingWeights<T> {
    /// Hidden layer of the distance MLP (followed by ReLU).
    pub mlp_hidden: Matrix<T>,
    pub mlp_out: Matrix<T>,
    pub w_d: Matrix<T>,
    pub w_a: Matrix<T>,
}

impl<T: Real> EmbeddingWeights<T> {
    pub fn init(d: usize, seed: u64) -> Self {
        let bound = 1.0 / (d.max(1) as f64).sqrt();
        let mut rng = SceneRng::derive(seed, 0x454d_4245);
        Self {
            mlp_hidden: uniform_matrix(d, d, bound, &mut rng),
            mlp_out: uniform_matrix(d, d, bound, &mut rng),
            w_d: uniform_matrix(d, d, bound, &mut rng),
            w_a: uniform_matrix(d, d, bound, &mut rng),
        }
    }

    pub fn zeros(d: usize) -> Self {
        let z = Matrix::zeros(d, d);
        Self {
            mlp_hidden: z.clone(),
            mlp_out: z.clone(),
            w_d: z.clone(),
            w_a: z,
        }
    }

    pub(crate) fn records(&self) -> Vec<MatrixRecord> {
        [&self.mlp_hidden, &self.mlp_out, &self.w_d, &self.w_a]
            .into_iter()
            .map(MatrixRecord::from)
            .collect()
    }

    pub(crate) fn from_records(r: &[MatrixRecord]) -> Result<Self> {
        match r {
            [a, b, c, d] => Ok(Self {
                mlp_hidden: a.to_matrix()?,
                mlp_out: b.to_matrix()?,
                w_d: c.to_matrix()?,
                w_a: d.to_matrix()?,
            }),
            _ => Err(Error::parse("embedding weights", format!("expected 4 matrices, got {}", r.len()))),
        }
    }

    fn mlp(&self, x: &[T]) -> Vec<T> {
        let hidden: Vec<T> = vecmat(x, &self.mlp_hidden)
            .into_iter()
            .map(|h| h.max(T::zero()))
            .collect();
        vecmat(&hidden, &self.mlp_out)
    }
}

/// Sinusoidal encoding of pairwise distances before the MLP.
pub fn distance_sinusoid<T: Real>(coords: &[Vec3<T>], cfg: &EmbeddingConfig) -> Result<PairEmbedding<T>> {
    cfg.validate()?;
    let n = coords.len();
    let sigma = T::lit(cfg.sigma_d);
    let mut values = Matrix::zeros(n * n, cfg.d);
    for i in 0..n {
        for j in 0..n {
            let dij = mat3::dist(coords[i], coords[j]);
            sinusoid(dij / sigma, values.row_mut(i * n + j));
        }
    }
    Ok(PairEmbedding { n, values })
}

/// Distance embedding: sinusoid followed by the one-hidden-layer MLP.
pub fn distance_embedding<T: Real>(
    coords: &[Vec3<T>],
    cfg: &EmbeddingConfig,
    weights: &EmbeddingWeights<T>,
) -> Result<PairEmbedding<T>> {
    let raw = distance_sinusoid(coords, cfg)?;
    let rows: Vec<Vec<T>> = raw.values.row_iter().map(|r| weights.mlp(r)).collect();
    Ok(PairEmbedding {
        n: raw.n,
        values: Matrix::from_rows(&rows)?,
    })
}

/// For each point, the other points sorted by distance (ties by index).
fn neighbor_lists<T: Real>(coords: &[Vec3<T>]) -> Vec<Vec<usize>> {
    (0..coords.len())
        .map(|i| {
            let mut others: Vec<usize> = (0..coords.len()).filter(|&k| k != i).collect();
            others.sort_by(|&a, &b| {
                mat3::dist_sq(coords[i], coords[a])
                    .partial_cmp(&mat3::dist_sq(coords[i], coords[b]))
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
            others
        })
        .collect()
}

/// Triplet angles `alpha[i][j][r]`: angle at `p_i` between `p_j - p_i` and
/// `p_x - p_i`, where `x` is the `r`-th nearest neighbor of `i` other than `j`.
/// Returned flat with index `(i * n + j) * k + r`.
pub fn angle_tensor<T: Real>(coords: &[Vec3<T>], k_anchors: usize) -> Result<Vec<T>> {
    let n = coords.len();
    if n < k_anchors + 2 {
        return Err(Error::NotEnoughAnchors {
            needed: k_anchors,
            available: n.saturating_sub(2),
        });
    }
    let neighbors = neighbor_lists(coords);
    let mut out = vec![T::zero(); n * n * k_anchors];
    for i in 0..n {
        for j in 0..n {
            let v = mat3::sub(coords[j], coords[i]);
            let anchors = neighbors[i].iter().filter(|&&x| x != j).take(k_anchors);
            for (r, &x) in anchors.enumerate() {
                let u = mat3::sub(coords[x], coords[i]);
                out[(i * n + j) * k_anchors + r] = mat3::angle_between(v, u);
            }
        }
    }
    Ok(out)
}

/// Angle embedding: the sinusoid ladder of `alpha / sigma_alpha` for every
/// `(i, j, r)`. Channel 0 is `sin(alpha / sigma_alpha)`. Row `(i * n + j) * k + r`.
pub fn angle_embedding<T: Real>(coords: &[Vec3<T>], cfg: &EmbeddingConfig) -> Result<Matrix<T>> {
    cfg.validate()?;
    let angles = angle_tensor(coords, cfg.k_anchors)?;
    let sigma = T::lit(cfg.sigma_alpha);
    let mut m = Matrix::zeros(angles.len(), cfg.d);
    for (row, &a) in angles.iter().enumerate() {
        sinusoid(a / sigma, m.row_mut(row));
    }
    Ok(m)
}

/// `E_ij = E^D_ij W_D + max_r (E^A_ijr W_A)`, the max taken per channel.
pub fn pair_geometric_embedding<T: Real>(
    coords: &[Vec3<T>],
    cfg: &EmbeddingConfig,
    weights: &EmbeddingWeights<T>,
) -> Result<PairEmbedding<T>> {
    cfg.validate()?;
    let n = coords.len();
    let d = cfg.d;
    if weights.w_d.shape() != (d, d) || weights.w_a.shape() != (d, d) {
        return Err(Error::dims("embedding weights must be d x d"));
    }
    let dist = distance_embedding(coords, cfg, weights)?;
    let angles = angle_tensor(coords, cfg.k_anchors)?;
    let k = cfg.k_anchors;
    let sigma_a = T::lit(cfg.sigma_alpha);

    let rows: Vec<Vec<T>> = (0..n * n)
        .into_par_iter()
        .map(|pair| {
            let mut out = vecmat(dist.values.row(pair), &weights.w_d);
            let mut best = vec![T::neg_infinity(); d];
            let mut enc = vec![T::zero(); d];
            for r in 0..k {
                sinusoid(angles[pair * k + r] / sigma_a, &mut enc);
                for (b, v) in best.iter_mut().zip(vecmat(&enc, &weights.w_a)) {
                    *b = b.max(v);
                }
            }
            for (o, b) in out.iter_mut().zip(best) {
                *o += b;
            }
            out
        })
        .collect();
    Ok(PairEmbedding {
        n,
        values: Matrix::from_rows(&rows)?,
    })
}

/// Absolute sinusoidal embedding of 2-D or 3-D positions: `d / axes` channels
/// per axis, each axis encoded with the sin/cos ladder of `coordinate / scale`.
pub fn absolute_position_embedding<T: Real, P: AsRef<[T]>>(positions: &[P], d: usize, scale: T) -> Result<Matrix<T>> {
    let axes = positions.first().map_or(3, |p| p.as_ref().len());
    if axes == 0 || d % (2 * axes) != 0 {
        return Err(Error::invalid(format!(
            "embedding width {d} is not divisible by 2 x {axes} axes"
        )));
    }
    let per_axis = d / axes;
    let mut m = Matrix::zeros(positions.len(), d);
    for (i, p) in positions.iter().enumerate() {
        let p = p.as_ref();
        if p.len() != axes {
            return Err(Error::dims(format!("position {i} has {} axes, expected {axes}", p.len())));
        }
        if p.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid(format!("position {i} is not finite")));
        }
        let row = m.row_mut(i);
        for (a, &c) in p.iter().enumerate() {
            sinusoid(c / scale, &mut row[a * per_axis..(a + 1) * per_axis]);
        }
    }
    Ok(m)
}
