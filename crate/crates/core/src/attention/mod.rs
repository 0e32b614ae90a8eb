//! Single-head attention passes (self, image aggregation, cross) and the
//! alternating hybrid stack built from them.

mod snapshot;

pub use snapshot::{StackSnapshot, SNAPSHOT_FORMAT};

use serde::{Deserialize, Serialize};

use crate::embedding::{absolute_position_embedding, pair_geometric_embedding, EmbeddingConfig, EmbeddingWeights, PairEmbedding};
use crate::error::{Error, Result};
use crate::geometry::SuperpointSet;
use crate::scalar::Real;
use crate::tensor::{init_projections, matmul, matmul_transposed, softmax_in_place, Matrix, ProjectionSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    #[serde(rename = "self")]
    SelfAttention,
    Aggregation,
    Cross,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayer<T> {
    pub kind: AttentionKind,
    pub proj: ProjectionSet<T>,
}

impl<T: Real> AttentionLayer<T> {
    pub fn new(kind: AttentionKind, proj: ProjectionSet<T>) -> Result<Self> {
        proj.validate()?;
        Ok(Self { kind, proj })
    }

    pub fn init(kind: AttentionKind, d: usize, seed: u64) -> Result<Self> {
        Self::new(kind, init_projections(d, seed)?)
    }

    /// Key dimension; always the projection width.
    pub fn d_k(&self) -> usize {
        self.proj.dim()
    }

    fn inv_sqrt_dk(&self) -> T {
        T::one() / T::from_count(self.d_k()).sqrt()
    }
}

/// Patch features of one image together with the pixel center of each patch.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePatches<T> {
    pub features: Matrix<T>,
    pub pixels: Vec<[T; 2]>,
}

impl<T: Real> ImagePatches<T> {
    pub fn new(features: Matrix<T>, pixels: Vec<[T; 2]>) -> Result<Self> {
        if features.rows() != pixels.len() {
            return Err(Error::dims(format!(
                "{} patch features for {} pixel centers",
                features.rows(),
                pixels.len()
            )));
        }
        Ok(Self { features, pixels })
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    /// Same layout with every feature set to zero.
    pub fn zeroed(&self) -> Self {
        Self {
            features: Matrix::zeros(self.features.rows(), self.features.cols()),
            pixels: self.pixels.clone(),
        }
    }
}

fn check_width<T: Real>(m: &Matrix<T>, d: usize, what: &str) -> Result<()> {
    if m.cols() != d {
        return Err(Error::dims(format!("{what} has width {}, expected {d}", m.cols())));
    }
    Ok(())
}

fn check_rows<T: Real>(m: &Matrix<T>, n: usize, what: &str) -> Result<()> {
    if m.rows() != n {
        return Err(Error::dims(format!("{what} has {} rows, expected {n}", m.rows())));
    }
    Ok(())
}

/// Softmax over each score row, then `residual + alpha * values`.
fn attend<T: Real>(mut scores: Matrix<T>, values: &Matrix<T>, residual: &Matrix<T>) -> Result<Matrix<T>> {
    let mut out = residual.clone();
    for i in 0..scores.rows() {
        softmax_in_place(scores.row_mut(i)).map_err(|_| Error::FullyMaskedRow(i))?;
        let out_row = out.row_mut(i);
        for (j, &a) in scores.row(i).iter().enumerate() {
            for (o, &v) in out_row.iter_mut().zip(values.row(j)) {
                *o += a * v;
            }
        }
    }
    Ok(out)
}

/// Self-attention scores `e_ij = (F_i W_q) . (F_j W_k + E_ij W_g) / sqrt(d_k)`.
pub fn self_attention_scores<T: Real>(
    feats: &Matrix<T>,
    pair_emb: &PairEmbedding<T>,
    layer: &AttentionLayer<T>,
) -> Result<Matrix<T>> {
    let d = layer.d_k();
    let n = feats.rows();
    check_width(feats, d, "features")?;
    if pair_emb.n() != n || pair_emb.dim() != d {
        return Err(Error::dims(format!(
            "pair embedding is {}x{}x{}, features are {n}x{d}",
            pair_emb.n(),
            pair_emb.n(),
            pair_emb.dim()
        )));
    }
    let p = &layer.proj;
    let q = matmul(feats, &p.w_q)?;
    let k = matmul(feats, &p.w_k)?;
    // q_i . (E_ij W_g) = (q_i W_g^T) . E_ij
    let qg = matmul_transposed(&q, &p.w_g)?;
    let mut e = matmul_transposed(&q, &k)?;
    let scale = layer.inv_sqrt_dk();
    for i in 0..n {
        let qgi = qg.row(i);
        for j in 0..n {
            let geo: T = qgi.iter().zip(pair_emb.get(i, j)).map(|(&a, &b)| a * b).sum();
            e[(i, j)] = (e[(i, j)] + geo) * scale;
        }
    }
    Ok(e)
}

/// Self-attention with geometric keys and a residual connection.
pub fn self_attention<T: Real>(
    feats: &Matrix<T>,
    pair_emb: &PairEmbedding<T>,
    layer: &AttentionLayer<T>,
) -> Result<Matrix<T>> {
    let e = self_attention_scores(feats, pair_emb, layer)?;
    let v = matmul(feats, &layer.proj.w_v)?;
    attend(e, &v, feats)
}

/// `(A + P W_a) (B + R W_b)^T / sqrt(d_k)` with `A = F_q W_q`, `B = F_k W_k`.
fn positional_scores<T: Real>(
    query_feats: &Matrix<T>,
    query_pos: &Matrix<T>,
    key_feats: &Matrix<T>,
    key_pos: &Matrix<T>,
    layer: &AttentionLayer<T>,
    key_pos_proj: &Matrix<T>,
) -> Result<Matrix<T>> {
    let p = &layer.proj;
    let q = matmul(query_feats, &p.w_q)?.add(&matmul(query_pos, &p.w_g)?)?;
    let k = matmul(key_feats, &p.w_k)?.add(&matmul(key_pos, key_pos_proj)?)?;
    Ok(matmul_transposed(&q, &k)?.scaled(layer.inv_sqrt_dk()))
}

/// Superpoints query image patches; the attended patch values are added to the point features.
pub fn aggregation_attention<T: Real>(
    point_feats: &Matrix<T>,
    image_feats: &Matrix<T>,
    point_pos_emb: &Matrix<T>,
    image_pos_emb: &Matrix<T>,
    layer: &AttentionLayer<T>,
) -> Result<Matrix<T>> {
    let d = layer.d_k();
    if image_feats.rows() == 0 {
        return Err(Error::NoImagePatches);
    }
    for (m, what) in [
        (point_feats, "point features"),
        (image_feats, "image features"),
        (point_pos_emb, "point position embedding"),
        (image_pos_emb, "image position embedding"),
    ] {
        check_width(m, d, what)?;
    }
    check_rows(point_pos_emb, point_feats.rows(), "point position embedding")?;
    check_rows(image_pos_emb, image_feats.rows(), "image position embedding")?;
    let e = positional_scores(point_feats, point_pos_emb, image_feats, image_pos_emb, layer, &layer.proj.w_f)?;
    let v = matmul(image_feats, &layer.proj.w_v)?;
    attend(e, &v, point_feats)
}

/// Source superpoints query the target cloud; returns the updated source features.
pub fn cross_attention<T: Real>(
    src_feats: &Matrix<T>,
    tgt_feats: &Matrix<T>,
    src_pos: &Matrix<T>,
    tgt_pos: &Matrix<T>,
    layer: &AttentionLayer<T>,
) -> Result<Matrix<T>> {
    let d = layer.d_k();
    if tgt_feats.rows() == 0 {
        return Err(Error::EmptyTarget);
    }
    for (m, what) in [
        (src_feats, "source features"),
        (tgt_feats, "target features"),
        (src_pos, "source position embedding"),
        (tgt_pos, "target position embedding"),
    ] {
        check_width(m, d, what)?;
    }
    check_rows(src_pos, src_feats.rows(), "source position embedding")?;
    check_rows(tgt_pos, tgt_feats.rows(), "target position embedding")?;
    let e = positional_scores(src_feats, src_pos, tgt_feats, tgt_pos, layer, &layer.proj.w_g)?;
    let v = matmul(tgt_feats, &layer.proj.w_v)?;
    attend(e, &v, src_feats)
}

/// Both directions of cross-attention with shared weights, each computed from the inputs before either update.
pub fn cross_attention_pair<T: Real>(
    src_feats: &Matrix<T>,
    tgt_feats: &Matrix<T>,
    src_pos: &Matrix<T>,
    tgt_pos: &Matrix<T>,
    layer: &AttentionLayer<T>,
) -> Result<(Matrix<T>, Matrix<T>)> {
    if src_feats.rows() == 0 {
        return Err(Error::EmptyTarget);
    }
    let (a, b) = rayon::join(
        || cross_attention(src_feats, tgt_feats, src_pos, tgt_pos, layer),
        || cross_attention(tgt_feats, src_feats, tgt_pos, src_pos, layer),
    );
    Ok((a?, b?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HybridStackConfig {
    pub n_iters: usize,
    pub d: usize,
    pub embedding: EmbeddingConfig,
    /// Length scale (meters) of the absolute 3-D position embedding.
    pub position_scale: f64,
    /// Length scale (pixels) of the absolute 2-D pixel embedding.
    pub pixel_scale: f64,
}

impl Default for HybridStackConfig {
    fn default() -> Self {
        let embedding = EmbeddingConfig::default();
        Self {
            n_iters: 3,
            d: embedding.d,
            embedding,
            position_scale: 1.0,
            pixel_scale: 10.0,
        }
    }
}

impl HybridStackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_iters == 0 {
            return Err(Error::invalid("n_iters must be at least 1"));
        }
        if self.d != self.embedding.d {
            return Err(Error::invalid(format!(
                "stack width {} differs from embedding width {}",
                self.d, self.embedding.d
            )));
        }
        if !(self.position_scale > 0.0) || !(self.pixel_scale > 0.0) {
            return Err(Error::invalid("position scales must be positive"));
        }
        self.embedding.validate()
    }
}

/// One iteration's layers, applied in field order.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationLayers<T> {
    pub self_attn: AttentionLayer<T>,
    pub aggregation: AttentionLayer<T>,
    pub cross: AttentionLayer<T>,
}

/// Every weight of the stack: the geometric embedding maps plus separate layers per iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct StackWeights<T> {
    pub seed: u64,
    pub embedding: EmbeddingWeights<T>,
    pub iterations: Vec<IterationLayers<T>>,
}

impl<T: Real> StackWeights<T> {
    pub fn init(cfg: &HybridStackConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        let layer_seed = |it: usize, slot: u64| seed.wrapping_add(((it as u64) << 8 | slot).wrapping_mul(0x2545_f491_4f6c_dd1d));
        let iterations = (0..cfg.n_iters)
            .map(|it| {
                Ok(IterationLayers {
                    self_attn: AttentionLayer::init(AttentionKind::SelfAttention, d, layer_seed(it, 1))?,
                    aggregation: AttentionLayer::init(AttentionKind::Aggregation, d, layer_seed(it, 2))?,
                    cross: AttentionLayer::init(AttentionKind::Cross, d, layer_seed(it, 3))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            seed,
            embedding: EmbeddingWeights::init(d, seed),
            iterations,
        })
    }

    /// All-zero weights: every layer reduces to its residual path.
    pub fn zeros(cfg: &HybridStackConfig) -> Self {
        let z = |kind| AttentionLayer {
            kind,
            proj: ProjectionSet::zeros(cfg.d),
        };
        Self {
            seed: 0,
            embedding: EmbeddingWeights::zeros(cfg.d),
            iterations: (0..cfg.n_iters)
                .map(|_| IterationLayers {
                    self_attn: z(AttentionKind::SelfAttention),
                    aggregation: z(AttentionKind::Aggregation),
                    cross: z(AttentionKind::Cross),
                })
                .collect(),
        }
    }

    pub fn d(&self) -> usize {
        self.embedding.w_d.rows()
    }

    pub fn n_iters(&self) -> usize {
        self.iterations.len()
    }
}

/// Per-cloud inputs that stay fixed across iterations.
#[derive(Debug, Clone)]
pub struct StackContext<T> {
    pub pair_emb: PairEmbedding<T>,
    pub point_pos: Matrix<T>,
    pub image_feats: Matrix<T>,
    pub image_pos: Matrix<T>,
}

impl<T: Real> StackContext<T> {
    pub fn build(
        cloud: &SuperpointSet<T>,
        image: &ImagePatches<T>,
        cfg: &HybridStackConfig,
        weights: &StackWeights<T>,
    ) -> Result<Self> {
        Ok(Self {
            pair_emb: pair_geometric_embedding(&cloud.coords, &cfg.embedding, &weights.embedding)?,
            point_pos: absolute_position_embedding(&cloud.coords, cfg.d, T::lit(cfg.position_scale))?,
            image_feats: image.features.clone(),
            image_pos: absolute_position_embedding(&image.pixels, cfg.d, T::lit(cfg.pixel_scale))?,
        })
    }
}

/// One self -> aggregation -> cross iteration on both clouds.
pub fn stack_iteration<T: Real>(
    src: &Matrix<T>,
    tgt: &Matrix<T>,
    src_ctx: &StackContext<T>,
    tgt_ctx: &StackContext<T>,
    layers: &IterationLayers<T>,
) -> Result<(Matrix<T>, Matrix<T>)> {
    let per_cloud = |f: &Matrix<T>, ctx: &StackContext<T>| -> Result<Matrix<T>> {
        let f = self_attention(f, &ctx.pair_emb, &layers.self_attn)?;
        aggregation_attention(&f, &ctx.image_feats, &ctx.point_pos, &ctx.image_pos, &layers.aggregation)
    };
    let (s, t) = rayon::join(|| per_cloud(src, src_ctx), || per_cloud(tgt, tgt_ctx));
    cross_attention_pair(&s?, &t?, &src_ctx.point_pos, &tgt_ctx.point_pos, &layers.cross)
}

/// Runs `n_iters` alternating iterations and returns the refined source and target superpoint features.
pub fn hybrid_stack<T: Real>(
    srcs: &SuperpointSet<T>,
    tgts: &SuperpointSet<T>,
    src_img: &ImagePatches<T>,
    tgt_img: &ImagePatches<T>,
    cfg: &HybridStackConfig,
    weights: &StackWeights<T>,
) -> Result<(Matrix<T>, Matrix<T>)> {
    cfg.validate()?;
    if weights.d() != cfg.d || weights.n_iters() != cfg.n_iters {
        return Err(Error::dims(format!(
            "weights are d={} x {} iterations, config asks d={} x {}",
            weights.d(),
            weights.n_iters(),
            cfg.d,
            cfg.n_iters
        )));
    }
    check_width(&srcs.features, cfg.d, "source superpoint features")?;
    check_width(&tgts.features, cfg.d, "target superpoint features")?;
    let (src_ctx, tgt_ctx) = rayon::join(
        || StackContext::build(srcs, src_img, cfg, weights),
        || StackContext::build(tgts, tgt_img, cfg, weights),
    );
    let (src_ctx, tgt_ctx) = (src_ctx?, tgt_ctx?);
    let mut s = srcs.features.clone();
    let mut t = tgts.features.clone();
    for layers in &weights.iterations {
        (s, t) = stack_iteration(&s, &t, &src_ctx, &tgt_ctx, layers)?;
    }
    Ok((s, t))
}
