//! Similarity scores, dustbin augmentation, Sinkhorn normalization and
//! coarse-to-dense correspondence extraction.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correspondence::{Correspondence, CorrespondenceSet, Level};
use crate::error::{Error, Result};
use crate::geometry::SuperpointSet;
use crate::scalar::Real;
use crate::tensor::{log_sum_exp, matmul_transposed, Matrix};

/// `S(m, n) = <F_m, F_n> / sqrt(d)`; pairs listed in `mask` are set to `-inf`.
pub fn feature_similarity<T: Real>(src: &Matrix<T>, tgt: &Matrix<T>, mask: Option<&[(usize, usize)]>) -> Result<Matrix<T>> {
    if src.cols() != tgt.cols() {
        return Err(Error::dims(format!(
            "source width {} vs target width {}",
            src.cols(),
            tgt.cols()
        )));
    }
    let mut s = matmul_transposed(src, tgt)?.scaled(T::one() / T::from_count(src.cols().max(1)).sqrt());
    for &(m, n) in mask.unwrap_or_default() {
        if m >= s.rows() || n >= s.cols() {
            return Err(Error::dims(format!("mask entry ({m}, {n}) outside {}x{}", s.rows(), s.cols())));
        }
        s[(m, n)] = T::neg_infinity();
    }
    Ok(s)
}

/// Appends a dustbin row and column filled with `z`: `[[S, z 1], [z 1^T, z]]`.
pub fn dustbin_augment<T: Real>(s: &Matrix<T>, z: T) -> Matrix<T> {
    let (r, c) = s.shape();
    Matrix::from_fn(r + 1, c + 1, |i, j| if i < r && j < c { s[(i, j)] } else { z })
}

/// Sinkhorn output: the normalized augmented matrix plus achieved residuals.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentMatrix<T> {
    /// `(N_P + 1) x (N_Q + 1)`; the last row and column are the dustbins.
    pub z: Matrix<T>,
    pub dustbin_logit: T,
    /// Largest `|row sum - 1|` over non-dustbin rows.
    pub row_residual: T,
    /// Largest deviation of a non-dustbin column sum from its target (1 unless the dustbin is closed).
    pub col_residual: T,
}

impl<T: Real> AssignmentMatrix<T> {
    pub fn n_src(&self) -> usize {
        self.z.rows() - 1
    }

    pub fn n_tgt(&self) -> usize {
        self.z.cols() - 1
    }

    pub fn interior(&self, i: usize, j: usize) -> T {
        self.z[(i, j)]
    }
}

/// Alternating row/column normalization of `exp(s_bar - max)`.
///
/// Rows `0..N_P` and columns `0..N_Q` are normalized to sum to one. The
/// dustbin row and column are exempt from that constraint: they carry the
/// slack mass `N_Q` and `N_P`, so the augmented problem is balanced and the
/// iteration converges geometrically. Kernel entries that underflow are
/// exact zeros; when every dustbin entry is zero the dustbin is closed and the
/// interior alone is balanced, columns then summing to `N_P / N_Q`. The
/// recurrence runs on log-scalings of the kernel; a row or column with no
/// nonzero kernel entry is degenerate.
pub fn sinkhorn<T: Real>(s_bar: &Matrix<T>, l_iters: usize) -> Result<AssignmentMatrix<T>> {
    if l_iters == 0 {
        return Err(Error::invalid("sinkhorn needs at least one iteration"));
    }
    let (rows, cols) = s_bar.shape();
    if rows < 2 || cols < 2 {
        return Err(Error::dims("augmented score matrix needs at least one interior row and column"));
    }
    let (np, nq) = (rows - 1, cols - 1);
    if s_bar.as_slice().iter().any(|x| x.is_nan() || *x == T::infinity()) {
        return Err(Error::invalid("scores must be finite or -inf"));
    }
    let global_max = s_bar.as_slice().iter().copied().fold(T::neg_infinity(), T::max);
    // Entries whose exp(x - max) underflows are exact zeros of the kernel.
    let floor = T::min_positive_value().ln();
    let log_k = s_bar.map(|x| {
        let v = x - global_max;
        if v < floor {
            T::neg_infinity()
        } else {
            v
        }
    });
    let closed = (0..rows).all(|i| log_k[(i, nq)] == T::neg_infinity())
        && (0..cols).all(|j| log_k[(np, j)] == T::neg_infinity());
    let (r_used, c_used) = if closed { (np, nq) } else { (rows, cols) };
    for i in 0..r_used {
        if (0..c_used).all(|j| log_k[(i, j)] == T::neg_infinity()) {
            return Err(Error::DegenerateScores { axis: "row", index: i });
        }
    }
    for j in 0..c_used {
        if (0..r_used).all(|i| log_k[(i, j)] == T::neg_infinity()) {
            return Err(Error::DegenerateScores { axis: "column", index: j });
        }
    }

    let (fp, fq) = (T::from_count(np), T::from_count(nq));
    let mut log_mu = vec![T::zero(); r_used];
    let mut log_nu = vec![if closed { (fp / fq).ln() } else { T::zero() }; c_used];
    if !closed {
        log_mu[np] = fq.ln();
        log_nu[nq] = fp.ln();
    }
    let mut log_a = vec![T::zero(); r_used];
    let mut log_b = vec![T::zero(); c_used];
    for _ in 0..l_iters {
        for i in 0..r_used {
            log_a[i] = log_mu[i] - log_sum_exp((0..c_used).map(|j| log_k[(i, j)] + log_b[j]));
        }
        for j in 0..c_used {
            log_b[j] = log_nu[j] - log_sum_exp((0..r_used).map(|i| log_k[(i, j)] + log_a[i]));
        }
    }
    let z = Matrix::from_fn(rows, cols, |i, j| {
        if i < r_used && j < c_used {
            (log_k[(i, j)] + log_a[i] + log_b[j]).exp()
        } else {
            T::zero()
        }
    });
    let row_residual = (0..np)
        .map(|i| (z.row(i).iter().copied().sum::<T>() - T::one()).abs())
        .fold(T::zero(), T::max);
    let col_residual = (0..nq)
        .map(|j| ((0..rows).map(|i| z[(i, j)]).sum::<T>() - log_nu[j].exp()).abs())
        .fold(T::zero(), T::max);
    Ok(AssignmentMatrix {
        z,
        dustbin_logit: s_bar[(np, nq)],
        row_residual,
        col_residual,
    })
}

/// The `k` largest non-dustbin entries of `Z`, ties broken by `(i, j)`.
pub fn topk_select<T: Real>(z: &AssignmentMatrix<T>, k: usize) -> CorrespondenceSet<T> {
    let (np, nq) = (z.n_src(), z.n_tgt());
    let mut entries: Vec<Correspondence<T>> = (0..np)
        .flat_map(|i| (0..nq).map(move |j| (i, j)))
        .map(|(i, j)| Correspondence::new(i, j, z.interior(i, j)))
        .collect();
    let order = |a: &Correspondence<T>, b: &Correspondence<T>| {
        b.confidence
            .partial_cmp(&a.confidence)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then((a.src, a.tgt).cmp(&(b.src, b.tgt)))
    };
    let k = k.min(entries.len());
    if k < entries.len() && k > 0 {
        entries.select_nth_unstable_by(k - 1, order);
    }
    entries.truncate(k);
    CorrespondenceSet::from_pairs(entries, Level::Coarse)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenseConfig {
    pub k_dense: usize,
    pub l_iters: usize,
    pub dustbin: f64,
}

impl Default for DenseConfig {
    fn default() -> Self {
        Self {
            k_dense: 3,
            l_iters: 50,
            dustbin: 0.0,
        }
    }
}

/// Dense pairs extracted from one coarse match, in global point indices.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchMatches<T> {
    /// Position of the coarse pair in the coarse set.
    pub coarse_index: usize,
    pub src_patch: usize,
    pub tgt_patch: usize,
    pub pairs: Vec<Correspondence<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatches<T> {
    /// Union over patches, duplicates resolved to their highest confidence.
    pub correspondences: CorrespondenceSet<T>,
    /// Per-patch output in coarse order; patches with an empty group are absent.
    pub patches: Vec<PatchMatches<T>>,
}

fn refine_patch<T: Real>(
    index: usize,
    pair: &Correspondence<T>,
    src: &SuperpointSet<T>,
    tgt: &SuperpointSet<T>,
    src_feats: &Matrix<T>,
    tgt_feats: &Matrix<T>,
    cfg: &DenseConfig,
) -> Result<Option<PatchMatches<T>>> {
    let (gs, gt) = (&src.groups[pair.src], &tgt.groups[pair.tgt]);
    if gs.is_empty() || gt.is_empty() {
        log::debug!("coarse pair ({}, {}) has an empty group; skipped", pair.src, pair.tgt);
        return Ok(None);
    }
    let s = feature_similarity(&src_feats.select_rows(gs), &tgt_feats.select_rows(gt), None)?;
    let z = sinkhorn(&dustbin_augment(&s, T::lit(cfg.dustbin)), cfg.l_iters)?;
    let pairs = topk_select(&z, cfg.k_dense)
        .iter()
        .map(|c| Correspondence::new(gs[c.src], gt[c.tgt], c.confidence))
        .collect();
    Ok(Some(PatchMatches {
        coarse_index: index,
        src_patch: pair.src,
        tgt_patch: pair.tgt,
        pairs,
    }))
}

/// Point-level matching inside every coarse superpoint pair.
pub fn dense_refine<T: Real>(
    coarse: &CorrespondenceSet<T>,
    src: &SuperpointSet<T>,
    tgt: &SuperpointSet<T>,
    src_dense_feats: &Matrix<T>,
    tgt_dense_feats: &Matrix<T>,
    cfg: &DenseConfig,
) -> Result<DenseMatches<T>> {
    if cfg.k_dense == 0 {
        return Err(Error::invalid("k_dense must be at least 1"));
    }
    if src_dense_feats.cols() != tgt_dense_feats.cols() {
        return Err(Error::dims("dense feature widths differ"));
    }
    for c in coarse {
        if c.src >= src.len() || c.tgt >= tgt.len() {
            return Err(Error::dims(format!("coarse pair ({}, {}) references a missing group", c.src, c.tgt)));
        }
    }
    let max_index = |s: &SuperpointSet<T>| s.groups.iter().flatten().copied().max();
    if max_index(src).is_some_and(|m| m >= src_dense_feats.rows())
        || max_index(tgt).is_some_and(|m| m >= tgt_dense_feats.rows())
    {
        return Err(Error::dims("group member index exceeds dense feature rows"));
    }
    let patches: Vec<PatchMatches<T>> = coarse
        .pairs()
        .par_iter()
        .enumerate()
        .map(|(idx, pair)| refine_patch(idx, pair, src, tgt, src_dense_feats, tgt_dense_feats, cfg))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let all = patches.iter().flat_map(|p| p.pairs.iter().copied()).collect();
    Ok(DenseMatches {
        correspondences: CorrespondenceSet::from_pairs(all, Level::Dense),
        patches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix<f64> {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn similarity_definition() {
        let a = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let s = feature_similarity(&a, &a, None).unwrap();
        assert_eq!(s[(0, 1)], 0.0);
        assert!((s[(0, 0)] - 1.0 / 2f64.sqrt()).abs() < 1e-15);
        let masked = feature_similarity(&a, &a, Some(&[(1, 0)])).unwrap();
        assert_eq!(masked[(1, 0)], f64::NEG_INFINITY);
        assert!(feature_similarity(&a, &m(&[&[1.0, 2.0, 3.0]]), None).is_err());
    }

    #[test]
    fn augment_shape() {
        let s = dustbin_augment(&m(&[&[3.0]]), 0.0);
        assert_eq!(s, m(&[&[3.0, 0.0], &[0.0, 0.0]]));
        let s = dustbin_augment(&m(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]), 0.5);
        assert_eq!(s.shape(), (3, 4));
        assert!((0..4).all(|j| s[(2, j)] == 0.5));
        assert!((0..3).all(|i| s[(i, 3)] == 0.5));
    }

    #[test]
    fn closed_dustbin_uniform_block() {
        let z = sinkhorn(&dustbin_augment(&Matrix::<f64>::zeros(2, 2), -1e6), 50).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((z.z[(i, j)] - 0.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dustbin_carries_the_slack_mass() {
        let s = dustbin_augment(&m(&[&[1.0, -2.0, 0.4], &[0.3, 0.7, -1.0]]), 0.25);
        let z = sinkhorn(&s, 50).unwrap();
        let row: f64 = z.z.row(2).iter().sum();
        let col: f64 = (0..3).map(|i| z.z[(i, 3)]).sum();
        assert!((row - 3.0).abs() < 1e-12);
        assert!((col - 2.0).abs() < 1e-12);
        assert!(z.row_residual < 1e-12 && z.col_residual < 1e-12);
    }

    #[test]
    fn closed_rectangular_dustbin_balances_interior() {
        let z = sinkhorn(&dustbin_augment(&Matrix::<f64>::zeros(2, 4), f64::NEG_INFINITY), 5).unwrap();
        assert!(z.z.as_slice().iter().zip(0..).all(|(&x, k)| {
            let (i, j) = (k / 5, k % 5);
            if i < 2 && j < 4 { (x - 0.25).abs() < 1e-15 } else { x == 0.0 }
        }));
        assert!(z.col_residual < 1e-15);
    }

    #[test]
    fn degenerate_row_is_reported() {
        let mut s = dustbin_augment(&m(&[&[0.0, 0.0], &[0.0, 0.0]]), 0.0);
        for j in 0..3 {
            s[(1, j)] = -1e6;
        }
        assert!(matches!(sinkhorn(&s, 10), Err(Error::DegenerateScores { axis: "row", index: 1 })));
    }

    #[test]
    fn topk_examples() {
        let z = AssignmentMatrix {
            z: m(&[&[0.9, 0.1, 0.0], &[0.2, 0.8, 0.0], &[0.0, 0.0, 1.0]]),
            dustbin_logit: 0.0,
            row_residual: 0.0,
            col_residual: 0.0,
        };
        let top = topk_select(&z, 2);
        assert_eq!(top.index_pairs(), vec![(0, 0), (1, 1)]);
        assert_eq!(topk_select(&z, 100).len(), 4);
    }

    #[test]
    fn single_point_groups() {
        let sp = |n: usize| {
            SuperpointSet::new(vec![[0.0; 3]; n], (0..n).map(|k| vec![k]).collect(), Matrix::zeros(n, 2)).unwrap()
        };
        let coarse = CorrespondenceSet::from_pairs(vec![Correspondence::new(1, 0, 0.7)], Level::Coarse);
        let f = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let out = dense_refine(&coarse, &sp(2), &sp(2), &f, &f, &DenseConfig::default()).unwrap();
        assert_eq!(out.correspondences.index_pairs(), vec![(1, 0)]);
        assert_eq!(out.patches.len(), 1);
    }

    #[test]
    fn empty_group_contributes_nothing() {
        let a = SuperpointSet::new(vec![[0.0; 3]; 2], vec![vec![0], vec![]], Matrix::zeros(2, 2)).unwrap();
        let coarse = CorrespondenceSet::from_pairs(
            vec![Correspondence::new(0, 0, 0.9), Correspondence::new(1, 0, 0.8)],
            Level::Coarse,
        );
        let f = m(&[&[1.0, 0.0]]);
        let out = dense_refine(&coarse, &a, &a, &f, &f, &DenseConfig::default()).unwrap();
        assert_eq!(out.patches.len(), 1);
        assert_eq!(out.correspondences.len(), 1);
    }
}
