//! Uniform hash grid for fixed-radius neighbor queries.

use std::collections::HashMap;

use crate::scalar::Real;
use crate::tensor::mat3::{self, Vec3};

pub struct RadiusIndex<'a, T> {
    points: &'a [Vec3<T>],
    cell: T,
    cells: HashMap<[i64; 3], Vec<usize>>,
}

impl<'a, T: Real> RadiusIndex<'a, T> {
    /// Indexes `points` with cubic cells of side `cell` (queries are exact for any radius).
    pub fn new(points: &'a [Vec3<T>], cell: T) -> Self {
        let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(*p, cell)).or_default().push(i);
        }
        Self { points, cell, cells }
    }

    fn key(p: Vec3<T>, cell: T) -> [i64; 3] {
        p.map(|c| (c / cell).floor().to_i64().unwrap_or(i64::MAX))
    }

    /// Calls `f(index)` for every point strictly within `radius` of `p`, in ascending cell order.
    pub fn for_each_within(&self, p: Vec3<T>, radius: T, mut f: impl FnMut(usize)) {
        let r_sq = radius * radius;
        let lo = Self::key(mat3::sub(p, [radius; 3]), self.cell);
        let hi = Self::key(mat3::add(p, [radius; 3]), self.cell);
        for x in lo[0]..=hi[0] {
            for y in lo[1]..=hi[1] {
                for z in lo[2]..=hi[2] {
                    if let Some(idx) = self.cells.get(&[x, y, z]) {
                        for &i in idx {
                            if mat3::dist_sq(p, self.points[i]) < r_sq {
                                f(i);
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn any_within(&self, p: Vec3<T>, radius: T) -> bool {
        let mut hit = false;
        self.for_each_within(p, radius, |_| hit = true);
        hit
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SceneRng;

    #[test]
    fn matches_brute_force() {
        let mut rng = SceneRng::new(5);
        let pts: Vec<[f64; 3]> = (0..300).map(|_| [rng.range(-1.0, 1.0), rng.range(-1.0, 1.0), rng.range(-1.0, 1.0)]).collect();
        let index = RadiusIndex::new(&pts, 0.1);
        for q in pts.iter().take(30) {
            let mut got = Vec::new();
            index.for_each_within(*q, 0.25, |i| got.push(i));
            got.sort();
            let want: Vec<usize> = (0..pts.len()).filter(|&i| mat3::dist(*q, pts[i]) < 0.25).collect();
            assert_eq!(got, want);
        }
    }
}
