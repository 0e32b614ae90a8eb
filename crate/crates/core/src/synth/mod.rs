//! Synthetic scene pairs with known ground truth: a base cloud of planar and
//! spherical patches, two overlapping slab crops, a random rigid motion,
//! coordinate noise and stand-in features.

pub mod features;
pub mod image;

use serde::{Deserialize, Serialize};

pub use features::{FeatureConfig, PointDescriptors, SynthFeatureProvider};
pub use image::{synth_image_grid, PinholeCamera};

use crate::attention::ImagePatches;
use crate::correspondence::{Correspondence, CorrespondenceSet, Level};
use crate::error::{Error, Result};
use crate::geometry::grid::RadiusIndex;
use crate::geometry::{PointCloud, RigidTransform, SuperpointSet};
use crate::losses::OverlapTable;
use crate::pipeline::CloudFeatures;
use crate::rng::SceneRng;
use crate::tensor::mat3::{self, Vec3};
use crate::tensor::Matrix;

/// Radius (meters) within which a point counts as overlapping the other cloud.
pub const OVERLAP_RADIUS: f64 = 0.05;
/// Side of the cube holding the base cloud, in meters.
pub const CUBE_SIDE: f64 = 3.0;
const MAX_ATTEMPTS: usize = 100;
const OVERLAP_TOLERANCE: f64 = 0.05;

fn default_surfaces() -> usize {
    24
}
fn default_grid() -> usize {
    8
}
fn default_focal() -> f64 {
    100.0
}
fn default_coarse_radius() -> f64 {
    2.0
}
fn default_superpoint_scale() -> f64 {
    3.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    /// Points in each of the two clouds.
    pub n_points: usize,
    pub n_superpoints: usize,
    pub overlap_fraction: f64,
    pub noise_sigma: f64,
    /// Fraction of dense feature rows replaced by random vectors.
    pub outlier_fraction: f64,
    pub feature_dim: usize,
    pub feature_noise_sigma: f64,
    pub seed: u64,
    #[serde(default = "default_surfaces")]
    pub n_surfaces: usize,
    #[serde(default = "default_grid")]
    pub grid_rows: usize,
    #[serde(default = "default_grid")]
    pub grid_cols: usize,
    #[serde(default = "default_focal")]
    pub focal: f64,
    #[serde(default = "default_coarse_radius")]
    pub coarse_radius: f64,
    #[serde(default = "default_superpoint_scale")]
    pub superpoint_scale: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_points: 2000,
            n_superpoints: 64,
            overlap_fraction: 0.5,
            noise_sigma: 0.01,
            outlier_fraction: 0.0,
            feature_dim: 24,
            feature_noise_sigma: 0.0,
            seed: 0,
            n_surfaces: default_surfaces(),
            grid_rows: default_grid(),
            grid_cols: default_grid(),
            focal: default_focal(),
            coarse_radius: default_coarse_radius(),
            superpoint_scale: default_superpoint_scale(),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_points == 0 || self.n_superpoints == 0 || self.n_superpoints > self.n_points {
            return Err(Error::invalid("need 0 < n_superpoints <= n_points"));
        }
        for (name, f) in [
            ("overlap_fraction", self.overlap_fraction),
            ("outlier_fraction", self.outlier_fraction),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1]")));
            }
        }
        if !(self.noise_sigma >= 0.0) || !(self.feature_noise_sigma >= 0.0) {
            return Err(Error::invalid("noise levels must be nonnegative"));
        }
        if self.n_surfaces == 0 {
            return Err(Error::invalid("need at least one surface"));
        }
        self.features().validate()
    }

    pub fn features(&self) -> FeatureConfig {
        FeatureConfig {
            d: self.feature_dim,
            noise_sigma: self.feature_noise_sigma,
            outlier_fraction: self.outlier_fraction,
            n_superpoints: self.n_superpoints,
            coarse_radius: self.coarse_radius,
            superpoint_scale: self.superpoint_scale,
            grid_rows: self.grid_rows,
            grid_cols: self.grid_cols,
            focal: self.focal,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub config: SceneConfig,
    /// Source points with their dense features attached.
    pub src: PointCloud<f64>,
    pub tgt: PointCloud<f64>,
    /// Per-point coarse descriptors the superpoint features are pooled from.
    pub src_coarse: Matrix<f64>,
    pub tgt_coarse: Matrix<f64>,
    /// Maps source coordinates onto target coordinates.
    pub gt: RigidTransform<f64>,
    pub src_super: SuperpointSet<f64>,
    pub tgt_super: SuperpointSet<f64>,
    pub src_img: ImagePatches<f64>,
    pub tgt_img: ImagePatches<f64>,
    pub overlap_table: OverlapTable<f64>,
    pub gt_correspondences: CorrespondenceSet<f64>,
    pub measured_overlap: f64,
}

fn orthonormal_pair(n: Vec3<f64>) -> (Vec3<f64>, Vec3<f64>) {
    let helper = if n[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let e1 = mat3::cross(n, helper);
    let e1 = mat3::scale(e1, 1.0 / mat3::norm(e1));
    (e1, mat3::cross(n, e1))
}

fn inside_cube(p: Vec3<f64>) -> bool {
    p.iter().all(|&c| (0.0..=CUBE_SIDE).contains(&c))
}

/// Samples `count` points of one random surface, rejecting samples outside the cube.
fn sample_surface(rng: &mut SceneRng, count: usize) -> Vec<Vec3<f64>> {
    let mut out = Vec::with_capacity(count);
    if rng.uniform() < 0.6 {
        let c = [0.0; 3].map(|_| rng.range(0.3, CUBE_SIDE - 0.3));
        let (e1, e2) = orthonormal_pair(rng.unit_vector());
        let (a, b) = (rng.range(0.25, 0.9), rng.range(0.25, 0.9));
        while out.len() < count {
            let p = mat3::add(c, mat3::add(mat3::scale(e1, rng.range(-a, a)), mat3::scale(e2, rng.range(-b, b))));
            if inside_cube(p) {
                out.push(p);
            }
        }
    } else {
        let r = rng.range(0.2, 0.5);
        let c = [0.0; 3].map(|_| rng.range(r, CUBE_SIDE - r));
        let axis = rng.unit_vector();
        let min_cos = rng.range(-0.5, 0.3);
        while out.len() < count {
            let u = rng.unit_vector();
            if mat3::dot(u, axis) >= min_cos {
                out.push(mat3::add(c, mat3::scale(u, r)));
            }
        }
    }
    out
}

/// Base cloud of `n` points split evenly over `surfaces` random patches.
pub fn base_cloud(seed: u64, n: usize, surfaces: usize) -> Vec<Vec3<f64>> {
    let mut rng = SceneRng::derive(seed, 0x4241_5345);
    (0..surfaces)
        .flat_map(|s| {
            let count = n / surfaces + usize::from(s < n % surfaces);
            sample_surface(&mut rng, count)
        })
        .collect()
}

/// Fraction of `src` points within [`OVERLAP_RADIUS`] of some target point after applying `gt`.
pub fn measure_overlap(src: &[Vec3<f64>], tgt: &[Vec3<f64>], gt: &RigidTransform<f64>) -> f64 {
    if src.is_empty() {
        return 0.0;
    }
    let index = RadiusIndex::new(tgt, OVERLAP_RADIUS);
    let hits = src.iter().filter(|&&p| index.any_within(gt.apply(p), OVERLAP_RADIUS)).count();
    hits as f64 / src.len() as f64
}

/// `o_ij`: fraction of source group `i` within [`OVERLAP_RADIUS`] of some
/// point of target group `j` after applying `gt`. Empty groups give 0.
pub fn overlap_table(
    src: &[Vec3<f64>],
    tgt: &[Vec3<f64>],
    src_groups: &[Vec<usize>],
    tgt_groups: &[Vec<usize>],
    gt: &RigidTransform<f64>,
) -> Result<OverlapTable<f64>> {
    let mut tgt_owner = vec![0usize; tgt.len()];
    for (j, g) in tgt_groups.iter().enumerate() {
        for &y in g {
            tgt_owner[y] = j;
        }
    }
    let index = RadiusIndex::new(tgt, OVERLAP_RADIUS);
    let mut o = Matrix::zeros(src_groups.len(), tgt_groups.len());
    let mut hit = vec![usize::MAX; tgt_groups.len()];
    let mut stamp = 0usize;
    for (i, g) in src_groups.iter().enumerate() {
        for &x in g {
            stamp += 1;
            let p = gt.apply(src[x]);
            index.for_each_within(p, OVERLAP_RADIUS, |y| {
                let j = tgt_owner[y];
                if hit[j] != stamp {
                    hit[j] = stamp;
                    o[(i, j)] += 1.0;
                }
            });
        }
        if !g.is_empty() {
            let inv = 1.0 / g.len() as f64;
            for v in o.row_mut(i) {
                *v *= inv;
            }
        }
    }
    OverlapTable::new(o)
}

struct Crops {
    base: Vec<Vec3<f64>>,
    src_idx: Vec<usize>,
    tgt_idx: Vec<usize>,
    src: Vec<Vec3<f64>>,
    tgt: Vec<Vec3<f64>>,
    pairs: Vec<(usize, usize)>,
}

/// Sorts the base cloud along `dir`; the source is the first `n` points and
/// the target the last `n`, each kept in base order.
fn slab_crops(base: &[Vec3<f64>], dir: Vec3<f64>, n: usize) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..base.len()).collect();
    order.sort_by(|&a, &b| {
        mat3::dot(base[a], dir)
            .partial_cmp(&mat3::dot(base[b], dir))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut src: Vec<usize> = order[..n].to_vec();
    let mut tgt: Vec<usize> = order[base.len() - n..].to_vec();
    src.sort_unstable();
    tgt.sort_unstable();
    (src, tgt)
}

fn make_crops(cfg: &SceneConfig, base_n: usize, dir: Vec3<f64>, gt: &RigidTransform<f64>, attempt: usize) -> Crops {
    let n = cfg.n_points;
    let base = base_cloud(cfg.seed, base_n, cfg.n_surfaces);
    let (si, ti) = slab_crops(&base, dir, n);
    let mut noise = SceneRng::derive(cfg.seed, 0x4e4f_4953_0000 + attempt as u64);
    let mut jitter = |p: Vec3<f64>| p.map(|c| c + cfg.noise_sigma * noise.normal());
    let src: Vec<_> = si.iter().map(|&k| jitter(base[k])).collect();
    let tgt: Vec<_> = ti.iter().map(|&k| jitter(gt.apply(base[k]))).collect();
    let tgt_pos: std::collections::HashMap<usize, usize> = ti.iter().enumerate().map(|(pos, &k)| (k, pos)).collect();
    let pairs = si
        .iter()
        .enumerate()
        .filter_map(|(a, k)| tgt_pos.get(k).map(|&b| (a, b)))
        .collect();
    Crops {
        base,
        src_idx: si,
        tgt_idx: ti,
        src,
        tgt,
        pairs,
    }
}

/// Generates a scene pair; deterministic in `cfg`.
pub fn generate_scene(cfg: &SceneConfig) -> Result<SyntheticScene> {
    cfg.validate()?;
    let mut rng = SceneRng::derive(cfg.seed, 0x5343_454e);
    let q = rng.unit_quaternion();
    let t = [0.0; 3].map(|_| rng.range(-1.0, 1.0));
    let gt = RigidTransform::new(mat3::from_quaternion(q), t)?;
    let dir = rng.unit_vector();

    let n = cfg.n_points;
    let target = cfg.overlap_fraction;
    // The shared fraction of the crops is (2n - base) / n; proximity across the
    // cut makes the measured overlap larger, so the nominal value is steered.
    let mut nominal = target;
    let mut measured = f64::NAN;
    let mut crops = None;
    for attempt in 0..MAX_ATTEMPTS {
        let base_n = ((2.0 - nominal) * n as f64).round().clamp(n as f64, 2.0 * n as f64) as usize;
        let c = make_crops(cfg, base_n, dir, &gt, attempt);
        measured = measure_overlap(&c.src, &c.tgt, &gt);
        if (measured - target).abs() <= OVERLAP_TOLERANCE {
            crops = Some(c);
            break;
        }
        nominal = (nominal + 0.8 * (target - measured)).clamp(0.0, 1.0);
    }
    let Some(crops) = crops else {
        return Err(Error::UnreachableOverlap {
            requested: target,
            measured,
            attempts: MAX_ATTEMPTS,
        });
    };

    let limit = 3.0 * cfg.noise_sigma + 1e-9;
    let gt_pairs: Vec<Correspondence<f64>> = crops
        .pairs
        .iter()
        .filter(|&&(a, b)| mat3::dist(gt.apply(crops.src[a]), crops.tgt[b]) < limit)
        .map(|&(a, b)| Correspondence::new(a, b, 1.0))
        .collect();

    // Descriptors come from the clean base geometry, so both crops agree on
    // shared points up to the configured feature noise.
    let fcfg = cfg.features();
    let base_desc = PointDescriptors::compute(&crops.base, &fcfg);
    let crop_features = |idx: &[usize], pts: &[Vec3<f64>], stream: u64| {
        let mut desc = base_desc.select(idx);
        let mut rng = SceneRng::derive(cfg.seed, 0x4645_4154 + stream);
        desc.perturb(fcfg.noise_sigma, fcfg.outlier_fraction, &mut rng);
        features::cloud_features(pts, &desc, &fcfg).map(|f| (f, desc.coarse))
    };
    let (sf, src_coarse) = crop_features(&crops.src_idx, &crops.src, 0)?;
    let (tf, tgt_coarse) = crop_features(&crops.tgt_idx, &crops.tgt, 1)?;
    let overlap = overlap_table(&crops.src, &crops.tgt, &sf.superpoints.groups, &tf.superpoints.groups, &gt)?;
    Ok(SyntheticScene {
        config: *cfg,
        src: PointCloud::with_features(crops.src, sf.dense)?,
        tgt: PointCloud::with_features(crops.tgt, tf.dense)?,
        src_coarse,
        tgt_coarse,
        gt,
        src_super: sf.superpoints,
        tgt_super: tf.superpoints,
        src_img: sf.image,
        tgt_img: tf.image,
        overlap_table: overlap,
        gt_correspondences: CorrespondenceSet::from_pairs(gt_pairs, Level::Dense),
        measured_overlap: measured,
    })
}

impl SyntheticScene {
    /// Per-point descriptors of the source and target crops.
    pub fn descriptors(&self) -> (PointDescriptors<f64>, PointDescriptors<f64>) {
        let pick = |c: &PointCloud<f64>, coarse: &Matrix<f64>| PointDescriptors {
            dense: c.features().cloned().unwrap_or_else(|| Matrix::zeros(c.len(), 0)),
            coarse: coarse.clone(),
        };
        (pick(&self.src, &self.src_coarse), pick(&self.tgt, &self.tgt_coarse))
    }

    /// Pipeline inputs for both clouds.
    pub fn cloud_features(&self) -> (CloudFeatures<f64>, CloudFeatures<f64>) {
        let pack = |c: &PointCloud<f64>, sp: &SuperpointSet<f64>, img: &ImagePatches<f64>| CloudFeatures {
            dense: c.features().cloned().unwrap_or_else(|| Matrix::zeros(c.len(), 0)),
            superpoints: sp.clone(),
            image: img.clone(),
        };
        (
            pack(&self.src, &self.src_super, &self.src_img),
            pack(&self.tgt, &self.tgt_super, &self.tgt_img),
        )
    }
}

/// Rewires exactly `round(fraction * n)` target indices to different random
/// targets in `0..n_tgt`, never creating a duplicate pair.
pub fn corrupt_correspondences<T: crate::scalar::Real>(
    corrs: &CorrespondenceSet<T>,
    n_tgt: usize,
    fraction: f64,
    seed: u64,
) -> Result<CorrespondenceSet<T>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::invalid("outlier fraction must lie in [0, 1]"));
    }
    let n = corrs.len();
    let count = (fraction * n as f64).round() as usize;
    if count == 0 {
        return Ok(corrs.clone());
    }
    if n_tgt < 2 {
        return Err(Error::invalid("rewiring needs at least two target points"));
    }
    let mut rng = SceneRng::derive(seed, 0x434f_5252);
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let mut targets: Vec<usize> = corrs.iter().map(|c| c.tgt).collect();
    let mut taken: std::collections::HashSet<(usize, usize)> = corrs.iter().map(|c| (c.src, c.tgt)).collect();
    for &k in &order[..count] {
        let src = corrs.pairs()[k].src;
        let old = targets[k];
        let mut new = old;
        for _ in 0..64 {
            let cand = rng.below(n_tgt);
            if cand != old && !taken.contains(&(src, cand)) {
                new = cand;
                break;
            }
        }
        if new == old {
            return Err(Error::invalid(format!("no free target to rewire source {src}")));
        }
        taken.remove(&(src, old));
        taken.insert((src, new));
        targets[k] = new;
    }
    Ok(corrs.with_targets(&targets))
}
