//! Training objectives evaluated forward with analytic gradients: the
//! overlap-aware circle loss on superpoint features, the fine matching
//! negative log-likelihood and the cross-modal contrastive loss.

pub mod gradcheck;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::RigidTransform;
use crate::scalar::Real;
use crate::tensor::mat3::{self, Vec3};
use crate::tensor::{log_sum_exp, matmul_transposed, Matrix};

/// Superpoint pair overlap ratios `o_ij`, each in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapTable<T> {
    o: Matrix<T>,
}

impl<T: Real> OverlapTable<T> {
    pub fn new(o: Matrix<T>) -> Result<Self> {
        if let Some(x) = o.as_slice().iter().find(|x| !(**x >= T::zero() && **x <= T::one())) {
            return Err(Error::invalid(format!("overlap ratio {x} outside [0, 1]")));
        }
        Ok(Self { o })
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.o[(i, j)]
    }

    pub fn shape(&self) -> (usize, usize) {
        self.o.shape()
    }

    pub fn as_matrix(&self) -> &Matrix<T> {
        &self.o
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CircleLossConfig {
    pub delta_p: f64,
    pub delta_n: f64,
    pub gamma: f64,
    /// Pairs with overlap strictly above this are positives.
    pub positive_overlap_min: f64,
}

impl Default for CircleLossConfig {
    fn default() -> Self {
        Self {
            delta_p: 0.1,
            delta_n: 1.4,
            gamma: 10.0,
            positive_overlap_min: 0.10,
        }
    }
}

impl CircleLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.delta_p && self.delta_p < self.delta_n) {
            return Err(Error::invalid("margins must satisfy 0 < delta_p < delta_n"));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::invalid("gamma must be positive"));
        }
        Ok(())
    }
}

/// Loss value with its gradient with respect to one input matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad<T> {
    pub value: T,
    pub grad: Matrix<T>,
}

/// Pairwise L2 distances between feature rows.
pub fn feature_distances<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols() != b.cols() {
        return Err(Error::dims(format!("feature widths {} and {}", a.cols(), b.cols())));
    }
    Ok(Matrix::from_fn(a.rows(), b.rows(), |i, j| {
        a.row(i)
            .iter()
            .zip(b.row(j))
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<T>()
            .sqrt()
    }))
}

enum Role<T> {
    Positive(T),
    Negative,
    Ignored,
}

fn role<T: Real>(o: T, min: T) -> Role<T> {
    if o > min {
        Role::Positive(o.sqrt())
    } else if o == T::zero() {
        Role::Negative
    } else {
        Role::Ignored
    }
}

/// `log(1 + exp(x))` without overflow.
fn softplus<T: Real>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Adds one direction's mean anchor loss; `pairs(a)` yields `(other, d, o, flat index)`.
fn circle_direction<T: Real>(
    n_anchors: usize,
    pairs: impl Fn(usize) -> Vec<(T, T, usize)>,
    cfg: &CircleLossConfig,
    grad: &mut [T],
    weight: T,
) -> (T, usize) {
    let (dp, dn, gamma, min) = (
        T::lit(cfg.delta_p),
        T::lit(cfg.delta_n),
        T::lit(cfg.gamma),
        T::lit(cfg.positive_overlap_min),
    );
    let two = T::lit(2.0);
    struct Term<T> {
        idx: usize,
        exponent: T,
        slope: T,
        positive: bool,
    }
    let mut per_anchor = Vec::new();
    for a in 0..n_anchors {
        let mut terms = Vec::new();
        for (d, o, idx) in pairs(a) {
            match role(o, min) {
                Role::Positive(lambda) => {
                    let m = (d - dp).max(T::zero());
                    terms.push(Term {
                        idx,
                        exponent: lambda * gamma * m * (d - dp),
                        slope: two * lambda * gamma * m,
                        positive: true,
                    });
                }
                Role::Negative => {
                    let m = (dn - d).max(T::zero());
                    terms.push(Term {
                        idx,
                        exponent: gamma * m * (dn - d),
                        slope: -two * gamma * m,
                        positive: false,
                    });
                }
                Role::Ignored => {}
            }
        }
        if terms.iter().any(|t| t.positive) {
            per_anchor.push(terms);
        }
    }
    let count = per_anchor.len();
    if count == 0 {
        return (T::zero(), 0);
    }
    let scale = weight / T::from_count(count);
    let mut total = T::zero();
    for terms in per_anchor {
        let lse = |pos: bool| log_sum_exp(terms.iter().filter(|t| t.positive == pos).map(|t| t.exponent));
        let (log_a, log_b) = (lse(true), lse(false));
        let x = log_a + log_b;
        if x == T::neg_infinity() {
            continue;
        }
        total += softplus(x);
        // d/dd log(1 + A B) = sigmoid(x) * softmax share * exponent slope
        let s = sigmoid(x) * scale;
        for t in &terms {
            let share = (t.exponent - if t.positive { log_a } else { log_b }).exp();
            grad[t.idx] += s * share * t.slope;
        }
    }
    (total / T::from_count(count), count)
}

/// Circle loss as a function of a precomputed distance matrix.
pub fn circle_loss_from_distances<T: Real>(
    dist: &Matrix<T>,
    overlaps: &OverlapTable<T>,
    cfg: &CircleLossConfig,
) -> Result<LossGrad<T>> {
    cfg.validate()?;
    let (np, nq) = dist.shape();
    if overlaps.shape() != (np, nq) {
        return Err(Error::dims(format!(
            "overlap table {:?} vs distances {:?}",
            overlaps.shape(),
            dist.shape()
        )));
    }
    let mut grad = vec![T::zero(); np * nq];
    let half = T::lit(0.5);
    let (lp, ap) = circle_direction(
        np,
        |i| (0..nq).map(|j| (dist[(i, j)], overlaps.get(i, j), i * nq + j)).collect(),
        cfg,
        &mut grad,
        half,
    );
    let (lq, aq) = circle_direction(
        nq,
        |j| (0..np).map(|i| (dist[(i, j)], overlaps.get(i, j), i * nq + j)).collect(),
        cfg,
        &mut grad,
        half,
    );
    if ap == 0 && aq == 0 {
        return Err(Error::EmptyAnchorSet);
    }
    Ok(LossGrad {
        value: half * (lp + lq),
        grad: Matrix::from_vec(np, nq, grad)?,
    })
}

/// Overlap-aware circle loss on superpoint features, averaged over both
/// directions. The gradient is with respect to the pairwise feature distances.
pub fn coarse_circle_loss<T: Real>(
    src_feats: &Matrix<T>,
    tgt_feats: &Matrix<T>,
    overlaps: &OverlapTable<T>,
    cfg: &CircleLossConfig,
) -> Result<LossGrad<T>> {
    circle_loss_from_distances(&feature_distances(src_feats, tgt_feats)?, overlaps, cfg)
}

/// Supervision for one patch: matched pairs and the points of each side left unmatched.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PatchSupervision {
    pub matches: Vec<(usize, usize)>,
    pub unmatched_src: Vec<usize>,
    pub unmatched_tgt: Vec<usize>,
}

impl PatchSupervision {
    /// Pairs of group members closer than `tau` under `gt`; members with no
    /// such partner are unmatched. Indices are local to the groups.
    pub fn from_geometry<T: Real>(
        src: &[Vec3<T>],
        tgt: &[Vec3<T>],
        src_group: &[usize],
        tgt_group: &[usize],
        gt: &RigidTransform<T>,
        tau: T,
    ) -> Self {
        let tau_sq = tau * tau;
        let moved: Vec<_> = src_group.iter().map(|&i| gt.apply(src[i])).collect();
        let mut out = Self::default();
        let mut tgt_hit = vec![false; tgt_group.len()];
        for (x, p) in moved.iter().enumerate() {
            let mut hit = false;
            for (y, &j) in tgt_group.iter().enumerate() {
                if mat3::dist_sq(*p, tgt[j]) < tau_sq {
                    out.matches.push((x, y));
                    tgt_hit[y] = true;
                    hit = true;
                }
            }
            if !hit {
                out.unmatched_src.push(x);
            }
        }
        out.unmatched_tgt = (0..tgt_group.len()).filter(|&y| !tgt_hit[y]).collect();
        out
    }

    fn entries(&self, rows: usize, cols: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let (dr, dc) = (rows - 1, cols - 1);
        self.matches
            .iter()
            .copied()
            .chain(self.unmatched_src.iter().map(move |&x| (x, dc)))
            .chain(self.unmatched_tgt.iter().map(move |&y| (dr, y)))
    }
}

/// Divisor applied to the summed per-patch fine losses.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FineNormalization {
    /// Number of patches.
    #[default]
    PatchCount,
    /// Number of supervised entries over all patches.
    SupervisedEntries,
}

/// Negative log-likelihood of supervised assignment entries, one gradient
/// matrix per patch.
pub fn fine_matching_loss<T: Real>(
    z_list: &[Matrix<T>],
    gt: &[PatchSupervision],
    norm: FineNormalization,
) -> Result<(T, Vec<Matrix<T>>)> {
    if z_list.len() != gt.len() {
        return Err(Error::dims(format!("{} assignment matrices, {} supervisions", z_list.len(), gt.len())));
    }
    if z_list.is_empty() {
        return Err(Error::invalid("fine loss needs at least one patch"));
    }
    let mut sum = T::zero();
    let mut grads = Vec::with_capacity(z_list.len());
    let mut supervised = 0usize;
    for (z, sup) in z_list.iter().zip(gt) {
        let (r, c) = z.shape();
        if r < 2 || c < 2 {
            return Err(Error::dims("assignment matrix needs a dustbin row and column"));
        }
        let mut g = Matrix::zeros(r, c);
        for (x, y) in sup.entries(r, c) {
            if x >= r || y >= c {
                return Err(Error::dims(format!("supervised entry ({x}, {y}) outside {r}x{c}")));
            }
            let p = z[(x, y)];
            if !(p > T::zero()) {
                return Err(Error::ZeroProbability { row: x, col: y });
            }
            sum -= p.ln();
            g[(x, y)] -= T::one() / p;
            supervised += 1;
        }
        grads.push(g);
    }
    let n = match norm {
        FineNormalization::PatchCount => z_list.len(),
        FineNormalization::SupervisedEntries => supervised.max(1),
    };
    let inv = T::one() / T::from_count(n);
    for g in &mut grads {
        *g = g.scaled(inv);
    }
    Ok((sum * inv, grads))
}

/// Contrastive loss of a similarity matrix whose diagonal holds the positives.
pub fn contrastive_from_similarity<T: Real>(s: &Matrix<T>) -> Result<LossGrad<T>> {
    let (n, m) = s.shape();
    if n == 0 {
        return Err(Error::invalid("contrastive loss needs at least one row"));
    }
    if n != m {
        return Err(Error::dims(format!("similarity must be square, got {n}x{m}")));
    }
    let mut value = T::zero();
    let mut grad = Matrix::zeros(n, n);
    let inv_n = T::one() / T::from_count(n);
    for i in 0..n {
        let row = s.row(i);
        let lse = log_sum_exp(row.iter().copied());
        value += lse - row[i];
        for (j, &x) in row.iter().enumerate() {
            let p = (x - lse).exp();
            grad[(i, j)] = (p - if i == j { T::one() } else { T::zero() }) * inv_n;
        }
    }
    Ok(LossGrad {
        value: value * inv_n,
        grad,
    })
}

/// `s = F^P F^I^T / sqrt(d)` and the row-wise cross-entropy with the diagonal
/// as target. The gradient is with respect to `s`.
pub fn cross_modal_contrastive<T: Real>(geo_feats: &Matrix<T>, img_feats: &Matrix<T>) -> Result<LossGrad<T>> {
    if geo_feats.shape() != img_feats.shape() {
        return Err(Error::dims(format!(
            "geometric features {:?} vs image features {:?}",
            geo_feats.shape(),
            img_feats.shape()
        )));
    }
    let d = geo_feats.cols().max(1);
    let s = matmul_transposed(geo_feats, img_feats)?.scaled(T::one() / T::from_count(d).sqrt());
    contrastive_from_similarity(&s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_c: f64,
    pub l_f: f64,
    pub l_cmc: f64,
    pub total: f64,
    pub lambda_weight: f64,
}

pub const DEFAULT_LAMBDA: f64 = 0.5;

/// `total = l_c + l_f + lambda * l_cmc`.
pub fn total_loss(l_c: f64, l_f: f64, l_cmc: f64, lambda: f64) -> Result<LossReport> {
    if ![l_c, l_f, l_cmc, lambda].iter().all(|x| x.is_finite()) {
        return Err(Error::invalid("loss components must be finite"));
    }
    Ok(LossReport {
        l_c,
        l_f,
        l_cmc,
        total: l_c + l_f + lambda * l_cmc,
        lambda_weight: lambda,
    })
}
