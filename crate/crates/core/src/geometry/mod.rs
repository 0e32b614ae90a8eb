//! Point clouds, rigid transforms, and nearest-superpoint grouping.

pub mod grid;
pub mod metrics;
pub mod ply;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::mat3::{self, Mat3, Vec3};
use crate::tensor::Matrix;

/// Ordered 3-D points with optional per-point feature rows.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud<T> {
    points: Vec<Vec3<T>>,
    features: Option<Matrix<T>>,
}

impl<T: Real> PointCloud<T> {
    pub fn new(points: Vec<Vec3<T>>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::invalid(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self { points, features: None })
    }

    pub fn with_features(points: Vec<Vec3<T>>, features: Matrix<T>) -> Result<Self> {
        let mut cloud = Self::new(points)?;
        cloud.set_features(features)?;
        Ok(cloud)
    }

    pub fn set_features(&mut self, features: Matrix<T>) -> Result<()> {
        if features.rows() != self.points.len() {
            return Err(Error::dims(format!(
                "{} feature rows for {} points",
                features.rows(),
                self.points.len()
            )));
        }
        self.features = Some(features);
        Ok(())
    }

    pub fn points(&self) -> &[Vec3<T>] {
        &self.points
    }

    pub fn features(&self) -> Option<&Matrix<T>> {
        self.features.as_ref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Vec3<T> {
        centroid(&self.points)
    }

    pub fn cast<U: Real>(&self) -> PointCloud<U> {
        PointCloud {
            points: self.points.iter().map(|p| p.map(|c| U::lit(c.as_f64()))).collect(),
            features: self.features.as_ref().map(|f| f.cast()),
        }
    }
}

pub fn centroid<T: Real>(points: &[Vec3<T>]) -> Vec3<T> {
    if points.is_empty() {
        return [T::zero(); 3];
    }
    let sum = points.iter().fold([T::zero(); 3], |acc, &p| mat3::add(acc, p));
    mat3::scale(sum, T::one() / T::from_count(points.len()))
}

/// Proper rigid motion `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform<T> {
    rotation: Mat3<T>,
    translation: Vec3<T>,
}

/// Tolerance on `RᵀR = I` and `det R = 1`: 1e-9, relaxed for low-precision scalars.
fn rotation_tolerance<T: Real>() -> T {
    T::lit(1e-9).max(T::epsilon() * T::lit(64.0))
}

impl<T: Real> RigidTransform<T> {
    /// Validating constructor.
    pub fn new(rotation: Mat3<T>, translation: Vec3<T>) -> Result<Self> {
        let tol = rotation_tolerance::<T>();
        let rtr = mat3::mul(&mat3::transpose(&rotation), &rotation);
        let orth = mat3::max_abs_diff(&rtr, &mat3::identity());
        let det = mat3::det(&rotation);
        if !(orth <= tol) || !((det - T::one()).abs() <= tol) {
            return Err(Error::invalid(format!(
                "rotation is not in SO(3): |RᵀR - I| = {orth}, det = {det}"
            )));
        }
        if translation.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("non-finite translation"));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self {
            rotation: mat3::identity(),
            translation: [T::zero(); 3],
        }
    }

    pub fn from_axis_angle(axis: Vec3<T>, angle: T, translation: Vec3<T>) -> Self {
        Self {
            rotation: mat3::axis_angle(axis, angle),
            translation,
        }
    }

    pub fn rotation(&self) -> &Mat3<T> {
        &self.rotation
    }

    pub fn translation(&self) -> Vec3<T> {
        self.translation
    }

    #[inline]
    pub fn apply(&self, p: Vec3<T>) -> Vec3<T> {
        mat3::add(mat3::mul_vec(&self.rotation, p), self.translation)
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: mat3::mul(&self.rotation, &other.rotation),
            translation: self.apply(other.translation),
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = mat3::transpose(&self.rotation);
        Self {
            rotation: rt,
            translation: mat3::scale(mat3::mul_vec(&rt, self.translation), -T::one()),
        }
    }

    pub fn cast<U: Real>(&self) -> RigidTransform<U> {
        RigidTransform {
            rotation: self.rotation.map(|r| r.map(|c| U::lit(c.as_f64()))),
            translation: self.translation.map(|c| U::lit(c.as_f64())),
        }
    }
}

/// Maps every point through `t`; features are carried through unchanged.
pub fn apply_transform<T: Real>(cloud: &PointCloud<T>, t: &RigidTransform<T>) -> PointCloud<T> {
    PointCloud {
        points: cloud.points.iter().map(|&p| t.apply(p)).collect(),
        features: cloud.features.clone(),
    }
}

/// Rotation angle between two rotations in degrees, and translation distance.
///
/// The angle of `R_gtᵀ R_est` is evaluated as `atan2(sin, cos)` with
/// `cos = (tr - 1)/2` and `sin` from the skew part, which equals the clamped
/// `arccos` form but stays accurate near zero.
pub fn transform_errors<T: Real>(estimated: &RigidTransform<T>, ground_truth: &RigidTransform<T>) -> (T, T) {
    if estimated == ground_truth {
        return (T::zero(), T::zero());
    }
    let rel = mat3::mul(&mat3::transpose(&ground_truth.rotation), &estimated.rotation);
    let rte = mat3::dist(estimated.translation, ground_truth.translation);
    (rotation_angle(&rel).to_degrees(), rte)
}

/// Rotation angle (radians, in `[0, pi]`) of a rotation matrix.
pub fn rotation_angle<T: Real>(r: &Mat3<T>) -> T {
    let half = T::lit(0.5);
    let cos = ((mat3::trace(r) - T::one()) * half).max(-T::one()).min(T::one());
    let skew = [r[2][1] - r[1][2], r[0][2] - r[2][0], r[1][0] - r[0][1]];
    let sin = mat3::norm(skew) * half;
    sin.atan2(cos)
}

/// Superpoints with their dense-point groups and features.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperpointSet<T> {
    pub coords: Vec<Vec3<T>>,
    /// `groups[k]` lists the dense indices whose nearest superpoint is `k`.
    pub groups: Vec<Vec<usize>>,
    pub features: Matrix<T>,
}

impl<T: Real> SuperpointSet<T> {
    pub fn new(coords: Vec<Vec3<T>>, groups: Vec<Vec<usize>>, features: Matrix<T>) -> Result<Self> {
        if groups.len() != coords.len() || features.rows() != coords.len() {
            return Err(Error::dims(format!(
                "{} superpoints, {} groups, {} feature rows",
                coords.len(),
                groups.len(),
                features.rows()
            )));
        }
        Ok(Self { coords, groups, features })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

/// Assigns each point to its nearest superpoint (lowest index on ties).
/// Superpoints with no members keep an empty group.
pub fn group_by_nearest_superpoint<T: Real>(points: &[Vec3<T>], superpoints: &[Vec3<T>]) -> Result<Vec<Vec<usize>>> {
    if superpoints.is_empty() {
        return Err(Error::NoSuperpoints);
    }
    let mut groups = vec![Vec::new(); superpoints.len()];
    for (i, &p) in points.iter().enumerate() {
        groups[nearest_index(p, superpoints)].push(i);
    }
    Ok(groups)
}

/// Index of the nearest candidate; first one wins on ties. `candidates` must be non-empty.
pub fn nearest_index<T: Real>(p: Vec3<T>, candidates: &[Vec3<T>]) -> usize {
    let mut best = 0;
    let mut best_d = T::infinity();
    for (k, &s) in candidates.iter().enumerate() {
        let d = mat3::dist_sq(p, s);
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

/// Farthest-point sampling starting from point 0; ties go to the lowest index.
pub fn farthest_point_sampling<T: Real>(points: &[Vec3<T>], count: usize) -> Vec<usize> {
    let count = count.min(points.len());
    if count == 0 {
        return Vec::new();
    }
    let mut chosen = Vec::with_capacity(count);
    let mut min_d = vec![T::infinity(); points.len()];
    let mut current = 0;
    chosen.push(current);
    while chosen.len() < count {
        let c = points[current];
        let mut best = 0;
        let mut best_d = -T::one();
        for (i, (&p, d)) in points.iter().zip(min_d.iter_mut()).enumerate() {
            let di = mat3::dist_sq(p, c);
            if di < *d {
                *d = di;
            }
            if *d > best_d {
                best_d = *d;
                best = i;
            }
        }
        current = best;
        chosen.push(current);
    }
    chosen
}

/// Serialized form of a rigid transform: row-major rotation and translation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformRecord {
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

impl<T: Real> From<&RigidTransform<T>> for TransformRecord {
    fn from(t: &RigidTransform<T>) -> Self {
        let r = t.rotation();
        let mut rotation = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                rotation[3 * i + j] = r[i][j].as_f64();
            }
        }
        Self {
            rotation,
            translation: t.translation().map(|c| c.as_f64()),
        }
    }
}

impl TransformRecord {
    pub fn to_transform<T: Real>(&self) -> Result<RigidTransform<T>> {
        let r = &self.rotation;
        let rot = [
            [r[0], r[1], r[2]],
            [r[3], r[4], r[5]],
            [r[6], r[7], r[8]],
        ];
        RigidTransform::new(rot.map(|row| row.map(T::lit)), self.translation.map(T::lit))
    }
}
