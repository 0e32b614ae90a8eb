//! Rigid-invariant stand-in descriptors. Every point carries a dense block
//! (sorted distances to its `d` nearest neighbors, z-scored per column and
//! then per row) and a coarse block
//! (soft histogram of distances to all points within `coarse_radius`).
//! Superpoint features are row-standardized group means of the coarse block.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::image::synth_image_grid;
use crate::error::{Error, Result};
use crate::geometry::{farthest_point_sampling, group_by_nearest_superpoint, SuperpointSet};
use crate::pipeline::{CloudFeatures, FeatureProvider};
use crate::rng::SceneRng;
use crate::scalar::Real;
use crate::tensor::mat3::{self, Vec3};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub d: usize,
    pub noise_sigma: f64,
    /// Fraction of dense rows replaced by standard-normal vectors.
    pub outlier_fraction: f64,
    pub n_superpoints: usize,
    /// Outer radius (meters) of the coarse distance histogram.
    pub coarse_radius: f64,
    /// Multiplier on the unit-variance superpoint rows; sharpens the coarse similarity.
    pub superpoint_scale: f64,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub focal: f64,
    pub seed: u64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            d: 24,
            noise_sigma: 0.0,
            outlier_fraction: 0.0,
            n_superpoints: 64,
            coarse_radius: 2.0,
            superpoint_scale: 3.0,
            grid_rows: 8,
            grid_cols: 8,
            focal: 100.0,
            seed: 0,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n_superpoints == 0 {
            return Err(Error::invalid("feature width and superpoint count must be positive"));
        }
        if !(0.0..=1.0).contains(&self.outlier_fraction) {
            return Err(Error::invalid("outlier fraction must lie in [0, 1]"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::invalid("feature noise must be nonnegative"));
        }
        if !(self.coarse_radius > 0.0) || !(self.superpoint_scale > 0.0) || !(self.focal > 0.0) {
            return Err(Error::invalid("coarse radius, superpoint scale and focal must be positive"));
        }
        if self.grid_rows < 2 || self.grid_cols < 2 {
            return Err(Error::invalid("image grid must be at least 2x2"));
        }
        Ok(())
    }
}

/// Row `i` holds the distances from point `i` to its `m` nearest other points, ascending.
/// Clouds with fewer than `m + 1` points repeat the largest distance.
pub fn sorted_neighbor_distances<T: Real>(points: &[Vec3<T>], m: usize) -> Matrix<T> {
    let rows: Vec<Vec<T>> = points
        .par_iter()
        .map(|&p| {
            let mut d: Vec<T> = points.iter().map(|&q| mat3::dist(p, q)).collect();
            let keep = (m + 1).min(d.len());
            let by = |a: &T, b: &T| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal);
            if keep < d.len() {
                d.select_nth_unstable_by(keep, by);
            }
            d.truncate(keep);
            d.sort_unstable_by(by);
            // d[0] is the point itself
            (1..=m).map(|k| d[k.min(d.len() - 1)]).collect()
        })
        .collect();
    Matrix::from_rows(&rows).unwrap_or_else(|_| Matrix::zeros(0, m))
}

/// `ln(1 + h_k)` where `h` bins the distances from each center to every point
/// with linear (tent) weights over `d` bins centered at `radius (k + 1/2) / d`.
/// The weights vanish continuously at distance `radius (d + 1/2) / d`.
pub fn shell_histograms<T: Real>(centers: &[Vec3<T>], points: &[Vec3<T>], d: usize, radius: T) -> Matrix<T> {
    let per_unit = T::from_count(d) / radius;
    let half = T::lit(0.5);
    let rows: Vec<Vec<T>> = centers
        .par_iter()
        .map(|&c| {
            let mut h = vec![T::zero(); d];
            for &p in points {
                let u = mat3::dist(c, p) * per_unit - half;
                let k = u.floor();
                if k >= T::from_count(d) {
                    continue;
                }
                let frac = u - k;
                if k >= T::zero() {
                    h[k.to_usize().unwrap_or(0)] += T::one() - frac;
                }
                let next = k + T::one();
                if next < T::from_count(d) {
                    h[next.to_usize().unwrap_or(0)] += frac;
                }
            }
            h.into_iter().map(|v| v.ln_1p()).collect()
        })
        .collect();
    Matrix::from_rows(&rows).unwrap_or_else(|_| Matrix::zeros(0, d))
}

/// Centers every column and scales it to unit standard deviation (columns with zero spread are only centered).
pub fn zscore_columns<T: Real>(m: &Matrix<T>) -> Matrix<T> {
    let (r, c) = m.shape();
    if r == 0 {
        return m.clone();
    }
    let n = T::from_count(r);
    let mut out = m.clone();
    for j in 0..c {
        let mean = (0..r).map(|i| m[(i, j)]).sum::<T>() / n;
        let var = (0..r).map(|i| (m[(i, j)] - mean).powi(2)).sum::<T>() / n;
        let sd = var.sqrt();
        let inv = if sd > T::epsilon() { T::one() / sd } else { T::one() };
        for i in 0..r {
            out[(i, j)] = (m[(i, j)] - mean) * inv;
        }
    }
    out
}

/// Centers every row and scales it to unit standard deviation (constant rows become zero).
pub fn standardize_rows<T: Real>(m: &Matrix<T>) -> Matrix<T> {
    let mut out = m.clone();
    let n = T::from_count(m.cols().max(1));
    for i in 0..m.rows() {
        let row = out.row_mut(i);
        let mean = row.iter().copied().sum::<T>() / n;
        let sd = (row.iter().map(|&x| (x - mean).powi(2)).sum::<T>() / n).sqrt();
        let inv = if sd > T::epsilon() { T::one() / sd } else { T::zero() };
        for x in row.iter_mut() {
            *x = (*x - mean) * inv;
        }
    }
    out
}

/// Row-standardized mean of `per_point` over each group; empty groups give zero rows.
pub fn pool_groups<T: Real>(groups: &[Vec<usize>], per_point: &Matrix<T>) -> Result<Matrix<T>> {
    let d = per_point.cols();
    let mut out = Matrix::zeros(groups.len(), d);
    for (i, g) in groups.iter().enumerate() {
        if g.is_empty() {
            continue;
        }
        let inv = T::one() / T::from_count(g.len());
        for &x in g {
            if x >= per_point.rows() {
                return Err(Error::dims(format!("group member {x} outside {} feature rows", per_point.rows())));
            }
            for (o, &v) in out.row_mut(i).iter_mut().zip(per_point.row(x)) {
                *o += v * inv;
            }
        }
    }
    Ok(standardize_rows(&out))
}

/// Clean per-point descriptors of one point set.
#[derive(Debug, Clone, PartialEq)]
pub struct PointDescriptors<T> {
    pub dense: Matrix<T>,
    pub coarse: Matrix<T>,
}

impl<T: Real> PointDescriptors<T> {
    pub fn compute(points: &[Vec3<T>], cfg: &FeatureConfig) -> Self {
        Self {
            dense: standardize_rows(&zscore_columns(&sorted_neighbor_distances(points, cfg.d))),
            coarse: shell_histograms(points, points, cfg.d, T::lit(cfg.coarse_radius)),
        }
    }

    pub fn len(&self) -> usize {
        self.dense.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            dense: self.dense.select_rows(rows),
            coarse: self.coarse.select_rows(rows),
        }
    }

    /// Adds Gaussian noise to both blocks, then replaces a fraction of dense rows by standard-normal vectors.
    pub fn perturb(&mut self, noise_sigma: f64, outlier_fraction: f64, rng: &mut SceneRng) {
        add_noise(&mut self.dense, noise_sigma, rng);
        add_noise(&mut self.coarse, noise_sigma, rng);
        let n = self.len();
        let n_out = (outlier_fraction * n as f64).round() as usize;
        if n_out > 0 {
            let mut rows: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut rows);
            for &i in &rows[..n_out] {
                for x in self.dense.row_mut(i) {
                    *x = T::lit(rng.normal());
                }
            }
        }
    }

    /// Both blocks side by side, `[dense | coarse]`.
    pub fn concat(&self) -> Matrix<T> {
        let (d, c) = (self.dense.cols(), self.coarse.cols());
        Matrix::from_fn(self.len(), d + c, |i, j| {
            if j < d {
                self.dense[(i, j)]
            } else {
                self.coarse[(i, j - d)]
            }
        })
    }

    /// Inverse of [`concat`](Self::concat) for a dense block of width `d`.
    pub fn split(m: &Matrix<T>, d: usize) -> Result<Self> {
        if m.cols() < d {
            return Err(Error::dims(format!("{} feature columns, dense block needs {d}", m.cols())));
        }
        Ok(Self {
            dense: Matrix::from_fn(m.rows(), d, |i, j| m[(i, j)]),
            coarse: Matrix::from_fn(m.rows(), m.cols() - d, |i, j| m[(i, j + d)]),
        })
    }
}

fn add_noise<T: Real>(m: &mut Matrix<T>, sigma: f64, rng: &mut SceneRng) {
    if sigma > 0.0 {
        for x in m.as_mut_slice() {
            *x += T::lit(sigma * rng.normal());
        }
    }
}

/// Superpoints by farthest-point sampling, nearest-superpoint groups, pooled
/// coarse features multiplied by `scale`.
pub fn superpoints<T: Real>(
    points: &[Vec3<T>],
    coarse: &Matrix<T>,
    n_superpoints: usize,
    scale: f64,
) -> Result<SuperpointSet<T>> {
    let coords: Vec<Vec3<T>> = farthest_point_sampling(points, n_superpoints)
        .into_iter()
        .map(|i| points[i])
        .collect();
    let groups = group_by_nearest_superpoint(points, &coords)?;
    let features = pool_groups(&groups, coarse)?.scaled(T::lit(scale));
    SuperpointSet::new(coords, groups, features)
}

/// Everything the pipeline consumes for one cloud, given its (possibly perturbed) descriptors.
pub fn cloud_features<T: Real>(
    points: &[Vec3<T>],
    desc: &PointDescriptors<T>,
    cfg: &FeatureConfig,
) -> Result<CloudFeatures<T>> {
    if desc.len() != points.len() {
        return Err(Error::dims(format!("{} descriptor rows for {} points", desc.len(), points.len())));
    }
    let superpoints = superpoints(points, &desc.coarse, cfg.n_superpoints, cfg.superpoint_scale)?;
    let image = synth_image_grid(points, &desc.dense, cfg.grid_rows, cfg.grid_cols, T::lit(cfg.focal))?;
    Ok(CloudFeatures {
        dense: desc.dense.clone(),
        superpoints,
        image,
    })
}

/// The synthetic backbone on raw coordinates: descriptors are computed from
/// the cloud itself, so crop boundaries and coordinate noise show up in them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthFeatureProvider {
    pub cfg: FeatureConfig,
}

impl<T: Real> FeatureProvider<T> for SynthFeatureProvider {
    fn extract(&self, points: &[Vec3<T>], stream: u64) -> Result<CloudFeatures<T>> {
        self.cfg.validate()?;
        if points.is_empty() {
            return Err(Error::invalid("cannot extract features from an empty cloud"));
        }
        let mut rng = SceneRng::derive(self.cfg.seed, 0x4645_4154 + stream);
        let mut desc = PointDescriptors::compute(points, &self.cfg);
        desc.perturb(self.cfg.noise_sigma, self.cfg.outlier_fraction, &mut rng);
        cloud_features(points, &desc, &self.cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::RigidTransform;

    fn cloud(seed: u64) -> Vec<[f64; 3]> {
        let mut rng = SceneRng::new(seed);
        (0..200).map(|_| [rng.range(0.0, 1.0), rng.range(0.0, 1.0), rng.range(0.0, 0.2)]).collect()
    }

    #[test]
    fn descriptors_are_rigid_invariant() {
        let pts = cloud(1);
        let t = RigidTransform::from_axis_angle([0.2, 0.9, -0.4], 2.0, [3.0, -1.0, 0.5]);
        let moved: Vec<_> = pts.iter().map(|&p| t.apply(p)).collect();
        let cfg = FeatureConfig {
            d: 8,
            n_superpoints: 10,
            ..Default::default()
        };
        let a = PointDescriptors::compute(&pts, &cfg);
        let b = PointDescriptors::compute(&moved, &cfg);
        assert!(a.dense.max_abs_diff(&b.dense) < 1e-6);
        assert!(a.coarse.max_abs_diff(&b.coarse) < 1e-6);
    }

    #[test]
    fn shell_histogram_matches_hand_binning() {
        // one center, two points at distances 0.25 and 0.6 with radius 1 and 2 bins (centers 0.25, 0.75)
        let h = shell_histograms(&[[0.0, 0.0, 0.0]], &[[0.25, 0.0, 0.0], [0.0, 0.6, 0.0]], 2, 1.0);
        // 0.25 lands fully in bin 0; 0.6 splits 0.3 / 0.7
        let expect = [(1.0f64 + 0.3).ln_1p(), 0.7f64.ln_1p()];
        assert!((h[(0, 0)] - expect[0]).abs() < 1e-12);
        assert!((h[(0, 1)] - expect[1]).abs() < 1e-12);
        // past radius (d + 1/2) / d nothing is counted
        let far = shell_histograms(&[[0.0, 0.0, 0.0]], &[[1.25, 0.0, 0.0]], 2, 1.0);
        assert_eq!(far.row(0), &[0.0, 0.0]);
    }

    #[test]
    fn pooling_standardizes_rows() {
        let per_point = Matrix::from_rows(&[&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0], &[0.0, 0.0, 6.0]]).unwrap();
        let p = pool_groups(&[vec![0, 2], vec![], vec![1]], &per_point).unwrap();
        for i in [0, 2] {
            let r = p.row(i);
            let mean: f64 = r.iter().sum::<f64>() / 3.0;
            let var: f64 = r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 3.0;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
        }
        assert_eq!(p.row(1), &[0.0, 0.0, 0.0]);
        assert!(pool_groups(&[vec![3]], &per_point).is_err());
    }

    #[test]
    fn concat_split_round_trip() {
        let pts = cloud(3);
        let cfg = FeatureConfig { d: 5, ..Default::default() };
        let desc = PointDescriptors::compute(&pts, &cfg);
        let back = PointDescriptors::split(&desc.concat(), 5).unwrap();
        assert_eq!(back, desc);
    }

    #[test]
    fn neighbor_distances_are_sorted() {
        let pts = cloud(2);
        let d = sorted_neighbor_distances(&pts, 6);
        for row in d.row_iter() {
            assert!(row.windows(2).all(|w| w[0] <= w[1]));
            assert!(row[0] > 0.0);
        }
    }

    #[test]
    fn zscore_moments() {
        let m = Matrix::from_rows(&[&[1.0, 5.0], &[2.0, 5.0], &[6.0, 5.0]]).unwrap();
        let z = zscore_columns(&m);
        let mean: f64 = (0..3).map(|i| z[(i, 0)]).sum::<f64>() / 3.0;
        let var: f64 = (0..3).map(|i| z[(i, 0)].powi(2)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-15 && (var - 1.0).abs() < 1e-12);
        assert!((0..3).all(|i| z[(i, 1)] == 0.0));
    }
}
