//! Weighted Procrustes fits per patch and local-to-global selection by
//! inlier voting over the full correspondence set.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correspondence::CorrespondenceSet;
use crate::error::{Error, Result};
use crate::geometry::RigidTransform;
use crate::matching::PatchMatches;
use crate::scalar::Real;
use crate::tensor::mat3::{self, Mat3, Vec3};
use crate::tensor::svd3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimationConfig {
    /// Acceptance radius (meters) for counting a pair as an inlier.
    pub tau_a: f64,
    pub min_pairs: usize,
    /// Re-fit the winning candidate once on its inliers.
    pub refit: bool,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        Self {
            tau_a: 0.05,
            min_pairs: 3,
            refit: true,
        }
    }
}

impl EstimationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_a > 0.0) {
            return Err(Error::invalid("tau_a must be positive"));
        }
        if self.min_pairs < 3 {
            return Err(Error::invalid("min_pairs must be at least 3"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalCandidate<T> {
    pub transform: RigidTransform<T>,
    /// Index of the coarse pair the candidate was fitted on.
    pub source_patch: usize,
    /// Inliers over the full correspondence set; filled in by [`score_candidates`].
    pub inlier_count: usize,
}

/// Closed-form minimizer of `sum w_j |R p_j + t - q_j|^2` with `min_pairs = 3`.
pub fn weighted_procrustes<T: Real>(src: &[Vec3<T>], tgt: &[Vec3<T>], weights: &[T]) -> Result<RigidTransform<T>> {
    weighted_procrustes_min(src, tgt, weights, 3)
}

pub fn weighted_procrustes_min<T: Real>(
    src: &[Vec3<T>],
    tgt: &[Vec3<T>],
    weights: &[T],
    min_pairs: usize,
) -> Result<RigidTransform<T>> {
    if src.len() != tgt.len() || src.len() != weights.len() {
        return Err(Error::dims(format!(
            "{} source points, {} target points, {} weights",
            src.len(),
            tgt.len(),
            weights.len()
        )));
    }
    if src.len() < min_pairs.max(3) {
        return Err(Error::TooFewPairs {
            got: src.len(),
            min: min_pairs.max(3),
        });
    }
    if weights.iter().any(|w| !(*w >= T::zero()) || !w.is_finite()) {
        return Err(Error::invalid("weights must be finite and nonnegative"));
    }
    let total: T = weights.iter().copied().sum();
    if !(total > T::zero()) {
        return Err(Error::invalid("total weight must be positive"));
    }

    let weighted_mean = |pts: &[Vec3<T>]| {
        let mut acc = [T::zero(); 3];
        for (p, &w) in pts.iter().zip(weights) {
            acc = mat3::add(acc, mat3::scale(*p, w));
        }
        mat3::scale(acc, T::one() / total)
    };
    let p_bar = weighted_mean(src);
    let q_bar = weighted_mean(tgt);

    let mut h: Mat3<T> = mat3::zeros();
    for ((p, q), &w) in src.iter().zip(tgt).zip(weights) {
        let ph = mat3::sub(*p, p_bar);
        let qh = mat3::sub(*q, q_bar);
        for a in 0..3 {
            for b in 0..3 {
                h[a][b] += w * ph[a] * qh[b];
            }
        }
    }
    let svd = svd3(&h);
    if !(svd.sigma[0] > T::zero()) || svd.sigma[1] <= svd.sigma[0] * T::epsilon().sqrt() {
        return Err(Error::DegeneratePatch);
    }
    let ut = mat3::transpose(&svd.u);
    let sign = mat3::det(&mat3::mul(&svd.v, &ut)).signum();
    let r = mat3::mul(&mat3::mul(&svd.v, &mat3::diag([T::one(), T::one(), sign])), &ut);
    let t = mat3::sub(q_bar, mat3::mul_vec(&r, p_bar));
    RigidTransform::new(r, t)
}

/// One candidate per patch, weighting each pair by its confidence. Patches
/// that fail the fit preconditions are skipped.
pub fn local_transforms<T: Real>(
    patches: &[PatchMatches<T>],
    src: &[Vec3<T>],
    tgt: &[Vec3<T>],
    cfg: &EstimationConfig,
) -> Result<Vec<LocalCandidate<T>>> {
    cfg.validate()?;
    let candidates: Vec<LocalCandidate<T>> = patches
        .par_iter()
        .map(|patch| {
            let p: Vec<_> = patch.pairs.iter().map(|c| src[c.src]).collect();
            let q: Vec<_> = patch.pairs.iter().map(|c| tgt[c.tgt]).collect();
            let w: Vec<_> = patch.pairs.iter().map(|c| c.confidence).collect();
            match weighted_procrustes_min(&p, &q, &w, cfg.min_pairs) {
                Ok(transform) => Some(LocalCandidate {
                    transform,
                    source_patch: patch.coarse_index,
                    inlier_count: 0,
                }),
                Err(e) => {
                    log::debug!("patch {} skipped: {e}", patch.coarse_index);
                    None
                }
            }
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    if candidates.is_empty() {
        return Err(Error::NoLocalCandidates);
    }
    Ok(candidates)
}

/// Number of pairs with `|R p + t - q| < tau`.
pub fn count_inliers<T: Real>(
    t: &RigidTransform<T>,
    corrs: &CorrespondenceSet<T>,
    src: &[Vec3<T>],
    tgt: &[Vec3<T>],
    tau: T,
) -> usize {
    let tau_sq = tau * tau;
    corrs
        .iter()
        .filter(|c| mat3::dist_sq(t.apply(src[c.src]), tgt[c.tgt]) < tau_sq)
        .count()
}

/// Fills in every candidate's inlier count over `all`.
pub fn score_candidates<T: Real>(
    candidates: &mut [LocalCandidate<T>],
    all: &CorrespondenceSet<T>,
    src: &[Vec3<T>],
    tgt: &[Vec3<T>],
    tau: T,
) {
    candidates
        .par_iter_mut()
        .for_each(|c| c.inlier_count = count_inliers(&c.transform, all, src, tgt, tau));
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection<T> {
    pub transform: RigidTransform<T>,
    /// Index into the candidate list of the winning candidate.
    pub winner: usize,
    /// Inliers of the returned transform.
    pub inlier_count: usize,
    /// Whether the returned transform is the re-fit rather than the raw winner.
    pub refitted: bool,
    /// Inlier count of each candidate, in input order.
    pub candidate_inliers: Vec<usize>,
}

/// Picks the candidate with the most inliers (lowest index on ties), then
/// optionally re-fits it on its inliers. The re-fit is kept only if it does
/// not lose inliers.
pub fn lgr_select<T: Real>(
    candidates: &[LocalCandidate<T>],
    all: &CorrespondenceSet<T>,
    src: &[Vec3<T>],
    tgt: &[Vec3<T>],
    cfg: &EstimationConfig,
) -> Result<Selection<T>> {
    cfg.validate()?;
    if candidates.is_empty() {
        return Err(Error::NoLocalCandidates);
    }
    for c in all {
        if c.src >= src.len() || c.tgt >= tgt.len() {
            return Err(Error::dims(format!("correspondence ({}, {}) out of range", c.src, c.tgt)));
        }
    }
    let tau = T::lit(cfg.tau_a);
    let mut scored = candidates.to_vec();
    score_candidates(&mut scored, all, src, tgt, tau);
    let candidate_inliers: Vec<usize> = scored.iter().map(|c| c.inlier_count).collect();
    let mut winner = 0;
    for (i, &n) in candidate_inliers.iter().enumerate() {
        if n > candidate_inliers[winner] {
            winner = i;
        }
    }
    let best = &scored[winner];
    let mut out = Selection {
        transform: best.transform.clone(),
        winner,
        inlier_count: best.inlier_count,
        refitted: false,
        candidate_inliers,
    };
    if !cfg.refit {
        return Ok(out);
    }

    let tau_sq = tau * tau;
    let inliers: Vec<_> = all
        .iter()
        .filter(|c| mat3::dist_sq(best.transform.apply(src[c.src]), tgt[c.tgt]) < tau_sq)
        .collect();
    let p: Vec<_> = inliers.iter().map(|c| src[c.src]).collect();
    let q: Vec<_> = inliers.iter().map(|c| tgt[c.tgt]).collect();
    let w: Vec<_> = inliers.iter().map(|c| c.confidence).collect();
    match weighted_procrustes_min(&p, &q, &w, cfg.min_pairs) {
        Ok(refit) => {
            let n = count_inliers(&refit, all, src, tgt, tau);
            if n >= out.inlier_count {
                out.transform = refit;
                out.inlier_count = n;
                out.refitted = true;
            }
        }
        Err(e) => log::debug!("re-fit skipped: {e}"),
    }
    Ok(out)
}
