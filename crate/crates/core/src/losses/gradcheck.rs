//! Central finite-difference checks of the analytic loss gradients.

use serde::{Deserialize, Serialize};

use super::{
    circle_loss_from_distances, contrastive_from_similarity, fine_matching_loss, CircleLossConfig, FineNormalization,
    OverlapTable, PatchSupervision,
};
use crate::error::Result;
use crate::rng::SceneRng;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub n_p: usize,
    pub n_q: usize,
    pub d: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator as a fraction of the
    /// largest analytic gradient magnitude of the loss. Entries far below that
    /// scale are judged against it, since central differences carry roundoff
    /// of order `eps * |loss| / step` regardless of the entry.
    pub floor: f64,
    /// Scale every analytic gradient by `1 + corrupt` before comparing.
    pub corrupt: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_p: 16,
            n_q: 16,
            d: 8,
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-3,
            corrupt: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckResult {
    pub loss: String,
    pub entries: usize,
    pub max_rel_error: f64,
    /// `(patch, row, col)` of the worst entry; patch is 0 for single-matrix losses.
    pub worst: (usize, usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Every compared entry of one loss; scoring waits until the gradient scale is known.
struct Entries(Vec<((usize, usize, usize), f64, f64)>);

impl Entries {
    fn new() -> Self {
        Self(Vec::new())
    }

    fn push(&mut self, at: (usize, usize, usize), analytic: f64, numeric: f64) {
        self.0.push((at, analytic, numeric));
    }

    fn finish(self, loss: &str, cfg: &GradcheckConfig) -> GradcheckResult {
        let scale = self.0.iter().map(|e| e.1.abs()).fold(0.0, f64::max);
        let floor = cfg.floor * scale;
        let mut worst = (0.0, (0, 0, 0), 0.0, 0.0);
        for (k, &(at, a, n)) in self.0.iter().enumerate() {
            let e = relative_error(a, n, floor);
            // NaN errors must surface as failures
            if k == 0 || e > worst.0 || e.is_nan() {
                worst = (e, at, a, n);
            }
        }
        GradcheckResult {
            loss: loss.to_owned(),
            entries: self.0.len(),
            max_rel_error: worst.0,
            worst: worst.1,
            analytic: worst.2,
            numeric: worst.3,
            passed: worst.0 < cfg.tolerance,
        }
    }
}

/// Compares `grad` against central differences of `f` around `x`, entry by entry.
fn check_matrix(
    x: &Matrix<f64>,
    grad: &Matrix<f64>,
    f: impl Fn(&Matrix<f64>) -> Result<f64>,
    patch: usize,
    cfg: &GradcheckConfig,
    entries: &mut Entries,
) -> Result<()> {
    let h = cfg.step;
    let mut probe = x.clone();
    for i in 0..x.rows() {
        for j in 0..x.cols() {
            let orig = x[(i, j)];
            probe[(i, j)] = orig + h;
            let up = f(&probe)?;
            probe[(i, j)] = orig - h;
            let down = f(&probe)?;
            probe[(i, j)] = orig;
            let numeric = (up - down) / (2.0 * h);
            entries.push((patch, i, j), grad[(i, j)] * (1.0 + cfg.corrupt), numeric);
        }
    }
    Ok(())
}

/// Random circle-loss instance: distances in `[0, 2]` kept away from the margins and
/// overlaps mixing positives, negatives and ignored pairs.
pub fn circle_instance(cfg: &GradcheckConfig, circle: &CircleLossConfig) -> Result<(Matrix<f64>, OverlapTable<f64>)> {
    let mut rng = SceneRng::derive(cfg.seed, 1);
    let margin = 10.0 * cfg.step;
    let dist = Matrix::from_fn(cfg.n_p, cfg.n_q, |_, _| loop {
        let d = rng.range(0.0, 2.0);
        if (d - circle.delta_p).abs() > margin && (d - circle.delta_n).abs() > margin {
            break d;
        }
    });
    let overlaps = Matrix::from_fn(cfg.n_p, cfg.n_q, |i, j| {
        if i == j % cfg.n_p.max(1) {
            rng.range(0.2, 1.0)
        } else {
            match rng.below(4) {
                0 => rng.range(0.11, 0.9),
                1 => rng.range(0.0, 0.1),
                _ => 0.0,
            }
        }
    });
    Ok((dist, OverlapTable::new(overlaps)?))
}

pub fn check_circle(cfg: &GradcheckConfig) -> Result<GradcheckResult> {
    let circle = CircleLossConfig::default();
    let (dist, overlaps) = circle_instance(cfg, &circle)?;
    let analytic = circle_loss_from_distances(&dist, &overlaps, &circle)?;
    let mut entries = Entries::new();
    check_matrix(
        &dist,
        &analytic.grad,
        |d| Ok(circle_loss_from_distances(d, &overlaps, &circle)?.value),
        0,
        cfg,
        &mut entries,
    )?;
    Ok(entries.finish("coarse_circle", cfg))
}

/// Random fine-loss instance: a few patches of strictly positive assignment
/// matrices with random supervision.
pub fn fine_instance(cfg: &GradcheckConfig) -> (Vec<Matrix<f64>>, Vec<PatchSupervision>) {
    let mut rng = SceneRng::derive(cfg.seed, 2);
    let patches = 3;
    let mut zs = Vec::new();
    let mut sups = Vec::new();
    for _ in 0..patches {
        let r = 2 + rng.below(cfg.n_p.max(2) / 2);
        let c = 2 + rng.below(cfg.n_q.max(2) / 2);
        zs.push(Matrix::from_fn(r + 1, c + 1, |_, _| rng.range(0.05, 1.0)));
        let mut sup = PatchSupervision::default();
        let mut tgt_used = vec![false; c];
        for x in 0..r {
            let y = rng.below(c);
            if rng.uniform() < 0.6 && !tgt_used[y] {
                tgt_used[y] = true;
                sup.matches.push((x, y));
            } else {
                sup.unmatched_src.push(x);
            }
        }
        sup.unmatched_tgt = (0..c).filter(|&y| !tgt_used[y]).collect();
        sups.push(sup);
    }
    (zs, sups)
}

pub fn check_fine(cfg: &GradcheckConfig) -> Result<GradcheckResult> {
    let (zs, sups) = fine_instance(cfg);
    let norm = FineNormalization::PatchCount;
    let (_, grads) = fine_matching_loss(&zs, &sups, norm)?;
    let mut entries = Entries::new();
    for p in 0..zs.len() {
        let f = |zp: &Matrix<f64>| {
            let mut all = zs.clone();
            all[p] = zp.clone();
            Ok(fine_matching_loss(&all, &sups, norm)?.0)
        };
        check_matrix(&zs[p], &grads[p], f, p, cfg, &mut entries)?;
    }
    Ok(entries.finish("fine_matching", cfg))
}

pub fn contrastive_instance(cfg: &GradcheckConfig) -> Matrix<f64> {
    let mut rng = SceneRng::derive(cfg.seed, 3);
    let bound = 3.0;
    Matrix::from_fn(cfg.n_p, cfg.n_p, |_, _| rng.range(-bound, bound))
}

pub fn check_contrastive(cfg: &GradcheckConfig) -> Result<GradcheckResult> {
    let s = contrastive_instance(cfg);
    let analytic = contrastive_from_similarity(&s)?;
    let mut entries = Entries::new();
    check_matrix(&s, &analytic.grad, |s| Ok(contrastive_from_similarity(s)?.value), 0, cfg, &mut entries)?;
    Ok(entries.finish("cross_modal_contrastive", cfg))
}

/// All three checks in a fixed order.
pub fn run_all(cfg: &GradcheckConfig) -> Result<Vec<GradcheckResult>> {
    Ok(vec![check_circle(cfg)?, check_fine(cfg)?, check_contrastive(cfg)?])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_instances_pass() {
        let cfg = GradcheckConfig {
            n_p: 4,
            n_q: 4,
            ..Default::default()
        };
        for r in run_all(&cfg).unwrap() {
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn corrupted_gradient_fails() {
        let cfg = GradcheckConfig {
            corrupt: 0.01,
            ..Default::default()
        };
        assert!(run_all(&cfg).unwrap().iter().all(|r| !r.passed));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 1e-9, 1e-6), 1e-3);
        assert_eq!(relative_error(2.0, 1.0, 1e-6), 0.5);
    }
}
