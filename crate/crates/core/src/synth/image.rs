//! Simulated image patches: a pinhole camera 4 m behind the cloud centroid
//! looking along +z, with each grid cell averaging the features that land in it.

use crate::attention::ImagePatches;
use crate::error::{Error, Result};
use crate::geometry::centroid;
use crate::scalar::Real;
use crate::tensor::mat3::Vec3;
use crate::tensor::Matrix;

/// Camera offset below the centroid along z, in meters.
pub const CAMERA_STANDOFF: f64 = 4.0;

/// Pinhole camera with principal point at `(focal, focal)` and a square `2 focal` image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PinholeCamera<T> {
    pub center: Vec3<T>,
    pub focal: T,
}

impl<T: Real> PinholeCamera<T> {
    pub fn behind(points: &[Vec3<T>], focal: T) -> Self {
        let c = centroid(points);
        Self {
            center: [c[0], c[1], c[2] - T::lit(CAMERA_STANDOFF)],
            focal,
        }
    }

    pub fn image_size(&self) -> T {
        self.focal + self.focal
    }

    /// Pixel `(u, v)` of a point, or `None` when it is not in front of the camera.
    pub fn project(&self, p: Vec3<T>) -> Option<[T; 2]> {
        let z = p[2] - self.center[2];
        if z <= T::zero() {
            return None;
        }
        Some([
            self.focal * (p[0] - self.center[0]) / z + self.focal,
            self.focal * (p[1] - self.center[1]) / z + self.focal,
        ])
    }

    /// Row-major grid cell containing pixel `uv`, if inside the image.
    pub fn cell(&self, uv: [T; 2], rows: usize, cols: usize) -> Option<usize> {
        let size = self.image_size();
        let [u, v] = uv;
        if !(u >= T::zero() && u < size && v >= T::zero() && v < size) {
            return None;
        }
        let col = ((u / size) * T::from_count(cols)).floor().to_usize()?.min(cols - 1);
        let row = ((v / size) * T::from_count(rows)).floor().to_usize()?.min(rows - 1);
        Some(row * cols + col)
    }
}

/// Cell features are the mean feature of the points projecting into them
/// (zero for empty cells); pixel coordinates are the cell centers.
pub fn synth_image_grid<T: Real>(
    points: &[Vec3<T>],
    features: &Matrix<T>,
    rows: usize,
    cols: usize,
    focal: T,
) -> Result<ImagePatches<T>> {
    if rows < 2 || cols < 2 {
        return Err(Error::invalid("image grid must be at least 2x2"));
    }
    if features.rows() != points.len() {
        return Err(Error::dims(format!("{} feature rows for {} points", features.rows(), points.len())));
    }
    let cam = PinholeCamera::behind(points, focal);
    let d = features.cols();
    let mut sums = Matrix::zeros(rows * cols, d);
    let mut counts = vec![0usize; rows * cols];
    let mut in_front = false;
    for (i, &p) in points.iter().enumerate() {
        let Some(uv) = cam.project(p) else { continue };
        in_front = true;
        if let Some(c) = cam.cell(uv, rows, cols) {
            counts[c] += 1;
            for (s, &f) in sums.row_mut(c).iter_mut().zip(features.row(i)) {
                *s += f;
            }
        }
    }
    if !in_front {
        return Err(Error::AllPointsBehindCamera);
    }
    for (c, &n) in counts.iter().enumerate() {
        if n > 0 {
            let inv = T::one() / T::from_count(n);
            for s in sums.row_mut(c) {
                *s *= inv;
            }
        }
    }
    let size = cam.image_size();
    let (cw, ch) = (size / T::from_count(cols), size / T::from_count(rows));
    let half = T::lit(0.5);
    let pixels = (0..rows * cols)
        .map(|k| [(T::from_count(k % cols) + half) * cw, (T::from_count(k / cols) + half) * ch])
        .collect();
    ImagePatches::new(sums, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_occupied_cell_holds_the_mean() {
        // All points on the optical axis project to the image center.
        let pts = vec![[0.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, 2.0]];
        let f = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 9.0]]).unwrap();
        let img = synth_image_grid(&pts, &f, 2, 2, 50.0).unwrap();
        let occupied: Vec<usize> = (0..4).filter(|&c| img.features.row(c) != [0.0, 0.0]).collect();
        assert_eq!(occupied, vec![3]);
        assert_eq!(img.features.row(3), &[3.0, 5.0]);
        assert_eq!(img.pixels[0], [25.0, 25.0]);
    }

    #[test]
    fn all_behind_is_an_error() {
        let cam = PinholeCamera {
            center: [0.0, 0.0, 0.0],
            focal: 10.0,
        };
        assert!(cam.project([0.0, 0.0, -1.0]).is_none());
        assert!(synth_image_grid::<f64>(&[], &Matrix::zeros(0, 2), 2, 2, 10.0).is_err());
    }
}
