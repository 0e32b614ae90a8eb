//! Registration metrics: rotation/translation error, inlier ratio, RMSE,
//! feature-matching recall, registration recall and patch inlier ratio.

use serde::{Deserialize, Serialize};

use super::{transform_errors, RigidTransform};
use crate::correspondence::CorrespondenceSet;
use crate::error::{Error, Result};
use crate::losses::OverlapTable;
use crate::scalar::Real;
use crate::tensor::mat3::{self, Vec3};

/// Inlier fraction; `empty` flags the zero-correspondence case, whose ratio is defined as 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InlierRatio<T> {
    pub ratio: T,
    pub empty: bool,
}

/// Fraction of pairs with `|R p + t - q| < radius` under `gt`.
pub fn correspondence_inlier_ratio<T: Real>(
    corrs: &CorrespondenceSet<T>,
    src: &[Vec3<T>],
    tgt: &[Vec3<T>],
    gt: &RigidTransform<T>,
    radius: T,
) -> Result<InlierRatio<T>> {
    if !(radius > T::zero()) {
        return Err(Error::invalid("inlier radius must be positive"));
    }
    if corrs.is_empty() {
        log::warn!("inlier ratio of an empty correspondence set is reported as 0");
        return Ok(InlierRatio {
            ratio: T::zero(),
            empty: true,
        });
    }
    let inliers = count_inliers(corrs, src, tgt, gt, radius);
    Ok(InlierRatio {
        ratio: T::from_count(inliers) / T::from_count(corrs.len()),
        empty: false,
    })
}

pub(crate) fn count_inliers<T: Real>(
    corrs: &CorrespondenceSet<T>,
    src: &[Vec3<T>],
    tgt: &[Vec3<T>],
    t: &RigidTransform<T>,
    radius: T,
) -> usize {
    corrs
        .iter()
        .filter(|c| mat3::dist(t.apply(src[c.src]), tgt[c.tgt]) < radius)
        .count()
}

/// Root-mean-square residual `|T p - q|` over index pairs; 0 for no pairs.
pub fn correspondence_rmse<T: Real>(
    t: &RigidTransform<T>,
    pairs: &[(usize, usize)],
    src: &[Vec3<T>],
    tgt: &[Vec3<T>],
) -> T {
    if pairs.is_empty() {
        return T::zero();
    }
    let sum: T = pairs
        .iter()
        .map(|&(i, j)| mat3::dist_sq(t.apply(src[i]), tgt[j]))
        .sum();
    (sum / T::from_count(pairs.len())).sqrt()
}

/// Fraction of coarse pairs whose superpoint patches actually overlap.
pub fn patch_inlier_ratio<T: Real>(coarse: &CorrespondenceSet<T>, overlap: &OverlapTable<T>) -> T {
    if coarse.is_empty() {
        return T::zero();
    }
    let hits = coarse
        .iter()
        .filter(|c| overlap.get(c.src, c.tgt) > T::zero())
        .count();
    T::from_count(hits) / T::from_count(coarse.len())
}

/// Thresholds for the recall-style metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricThresholds {
    /// Residual radius for counting a correspondence as an inlier (m).
    pub inlier_radius: f64,
    /// Minimum inlier ratio for a pair to count toward feature-matching recall.
    pub fmr_min_inlier_ratio: f64,
    /// RMSE bound for a pair to count as registered (m).
    pub rr_rmse: f64,
}

impl Default for MetricThresholds {
    fn default() -> Self {
        Self {
            inlier_radius: 0.1,
            fmr_min_inlier_ratio: 0.05,
            rr_rmse: 0.2,
        }
    }
}

/// Per-pair metrics. `fmr` and `rr` are 0/1 indicators for a single pair and
/// recall fractions once averaged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rre: f64,
    pub rte: f64,
    pub rmse: f64,
    pub inlier_ratio: f64,
    pub fmr: f64,
    pub rr: f64,
    pub pir: f64,
}

/// Ground truth needed to score one registration.
pub struct GroundTruth<'a, T> {
    pub transform: &'a RigidTransform<T>,
    pub correspondences: &'a [(usize, usize)],
    pub overlap: Option<&'a OverlapTable<T>>,
}

/// Scores an estimate for one pair.
pub fn evaluate_pair<T: Real>(
    estimate: &RigidTransform<T>,
    dense: &CorrespondenceSet<T>,
    coarse: Option<&CorrespondenceSet<T>>,
    src: &[Vec3<T>],
    tgt: &[Vec3<T>],
    gt: &GroundTruth<'_, T>,
    thresholds: &MetricThresholds,
) -> Result<MetricsReport> {
    let (rre, rte) = transform_errors(estimate, gt.transform);
    let rmse = correspondence_rmse(estimate, gt.correspondences, src, tgt).as_f64();
    let ir = correspondence_inlier_ratio(dense, src, tgt, gt.transform, T::lit(thresholds.inlier_radius))?;
    let pir = match (coarse, gt.overlap) {
        (Some(c), Some(o)) => patch_inlier_ratio(c, o).as_f64(),
        _ => 0.0,
    };
    let ir = ir.ratio.as_f64();
    Ok(MetricsReport {
        rre: rre.as_f64(),
        rte: rte.as_f64(),
        rmse,
        inlier_ratio: ir,
        fmr: indicator(ir >= thresholds.fmr_min_inlier_ratio),
        rr: indicator(rmse < thresholds.rr_rmse),
        pir,
    })
}

fn indicator(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Mean of each field over a batch of pairs.
pub fn aggregate(reports: &[MetricsReport]) -> MetricsReport {
    let n = reports.len().max(1) as f64;
    let mean = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    MetricsReport {
        rre: mean(|r| r.rre),
        rte: mean(|r| r.rte),
        rmse: mean(|r| r.rmse),
        inlier_ratio: mean(|r| r.inlier_ratio),
        fmr: mean(|r| r.fmr),
        rr: mean(|r| r.rr),
        pir: mean(|r| r.pir),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correspondence::Level;

    fn scene() -> (Vec<[f64; 3]>, Vec<[f64; 3]>, RigidTransform<f64>) {
        let gt = RigidTransform::from_axis_angle([0.0, 1.0, 0.0], 0.4, [0.5, -0.2, 1.0]);
        let src: Vec<[f64; 3]> = (0..10).map(|i| [i as f64 * 0.3, (i * i) as f64 * 0.1, 1.0]).collect();
        let tgt = src.iter().map(|&p| gt.apply(p)).collect();
        (src, tgt, gt)
    }

    #[test]
    fn exact_pairs_are_all_inliers() {
        let (src, tgt, gt) = scene();
        let pairs: Vec<_> = (0..10).map(|i| (i, i)).collect();
        let set = CorrespondenceSet::from_index_pairs(&pairs, Level::Dense);
        let ir = correspondence_inlier_ratio(&set, &src, &tgt, &gt, 0.05).unwrap();
        assert_eq!(ir.ratio, 1.0);
        assert!(!ir.empty);
    }

    #[test]
    fn half_displaced_pairs() {
        let (src, mut tgt, gt) = scene();
        let radius = 0.05;
        for p in tgt.iter_mut().take(5) {
            p[0] += 10.0 * radius;
        }
        let pairs: Vec<_> = (0..10).map(|i| (i, i)).collect();
        let set = CorrespondenceSet::from_index_pairs(&pairs, Level::Dense);
        let ir = correspondence_inlier_ratio(&set, &src, &tgt, &gt, radius).unwrap();
        assert_eq!(ir.ratio, 0.5);
    }

    #[test]
    fn empty_set_flags_warning() {
        let (src, tgt, gt) = scene();
        let ir = correspondence_inlier_ratio(&CorrespondenceSet::empty(Level::Dense), &src, &tgt, &gt, 0.1).unwrap();
        assert_eq!(ir, InlierRatio { ratio: 0.0, empty: true });
        assert!(correspondence_inlier_ratio(&CorrespondenceSet::empty(Level::Dense), &src, &tgt, &gt, 0.0).is_err());
    }

    #[test]
    fn rmse_zero_under_gt() {
        let (src, tgt, gt) = scene();
        let pairs: Vec<_> = (0..10).map(|i| (i, i)).collect();
        assert!(correspondence_rmse(&gt, &pairs, &src, &tgt) < 1e-12);
        assert!(correspondence_rmse(&RigidTransform::identity(), &pairs, &src, &tgt) > 0.5);
    }
}
