//! End-to-end registration: features, hybrid stack, coarse matching, dense
//! refinement, local fits and local-to-global selection.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{hybrid_stack, HybridStackConfig, ImagePatches, StackWeights};
use crate::correspondence::CorrespondenceSet;
use crate::error::{Error, Result};
use crate::estimation::{lgr_select, local_transforms, EstimationConfig, Selection};
use crate::geometry::metrics::{MetricThresholds, MetricsReport};
use crate::geometry::{RigidTransform, SuperpointSet};
use crate::losses::{CircleLossConfig, DEFAULT_LAMBDA};
use crate::matching::{dense_refine, dustbin_augment, feature_similarity, sinkhorn, topk_select, DenseConfig, DenseMatches};
use crate::scalar::Real;
use crate::synth::FeatureConfig;
use crate::tensor::mat3::Vec3;
use crate::tensor::Matrix;

/// Everything a backbone provides for one cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct CloudFeatures<T> {
    /// One row per dense point.
    pub dense: Matrix<T>,
    pub superpoints: SuperpointSet<T>,
    pub image: ImagePatches<T>,
}

/// Source of per-cloud features; `stream` distinguishes the two clouds of a pair.
pub trait FeatureProvider<T> {
    fn extract(&self, points: &[Vec3<T>], stream: u64) -> Result<CloudFeatures<T>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchingConfig {
    pub k_coarse: usize,
    pub k_dense: usize,
    pub l_iters: usize,
    pub dustbin: f64,
}

impl Default for MatchingConfig {
    fn default() -> Self {
        Self {
            k_coarse: 64,
            k_dense: 3,
            l_iters: 50,
            dustbin: 0.0,
        }
    }
}

impl MatchingConfig {
    pub fn dense(&self) -> DenseConfig {
        DenseConfig {
            k_dense: self.k_dense,
            l_iters: self.l_iters,
            dustbin: self.dustbin,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub stack: HybridStackConfig,
    pub matching: MatchingConfig,
    pub estimation: EstimationConfig,
    pub circle: CircleLossConfig,
    pub lambda: f64,
    pub features: FeatureConfig,
    pub thresholds: MetricThresholds,
    pub seed: u64,
    pub use_hybrid_stack: bool,
    pub use_image_features: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            stack: HybridStackConfig::default(),
            matching: MatchingConfig::default(),
            estimation: EstimationConfig::default(),
            circle: CircleLossConfig::default(),
            lambda: DEFAULT_LAMBDA,
            features: FeatureConfig::default(),
            thresholds: MetricThresholds::default(),
            seed: 0,
            use_hybrid_stack: true,
            use_image_features: true,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.stack.validate()?;
        self.estimation.validate()?;
        self.circle.validate()?;
        self.features.validate()?;
        if self.features.d != self.stack.d {
            return Err(Error::invalid(format!(
                "feature width {} differs from stack width {}",
                self.features.d, self.stack.d
            )));
        }
        if self.matching.k_coarse == 0 || self.matching.k_dense == 0 || self.matching.l_iters == 0 {
            return Err(Error::invalid("k_coarse, k_dense and l_iters must be positive"));
        }
        if !self.lambda.is_finite() {
            return Err(Error::invalid("lambda must be finite"));
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Wall-clock seconds per stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub model: f64,
    pub pose: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct Registration<T> {
    pub transform: RigidTransform<T>,
    pub coarse: CorrespondenceSet<T>,
    pub dense: DenseMatches<T>,
    pub selection: Selection<T>,
    pub sinkhorn_residual: T,
    pub timings: StageTimings,
}

/// Superpoint features handed to coarse matching, after the stack if enabled.
pub fn matching_features<T: Real>(
    src: &CloudFeatures<T>,
    tgt: &CloudFeatures<T>,
    cfg: &PipelineConfig,
    weights: &StackWeights<T>,
) -> Result<(Matrix<T>, Matrix<T>)> {
    if !cfg.use_hybrid_stack {
        return Ok((src.superpoints.features.clone(), tgt.superpoints.features.clone()));
    }
    let (si, ti);
    let (src_img, tgt_img) = if cfg.use_image_features {
        (&src.image, &tgt.image)
    } else {
        si = src.image.zeroed();
        ti = tgt.image.zeroed();
        (&si, &ti)
    };
    hybrid_stack(&src.superpoints, &tgt.superpoints, src_img, tgt_img, &cfg.stack, weights)
}

/// Registers `src` onto `tgt` from precomputed features.
pub fn register_with_features<T: Real>(
    src: &[Vec3<T>],
    tgt: &[Vec3<T>],
    src_feats: &CloudFeatures<T>,
    tgt_feats: &CloudFeatures<T>,
    cfg: &PipelineConfig,
    weights: &StackWeights<T>,
) -> Result<Registration<T>> {
    cfg.validate()?;
    let start = Instant::now();
    let (fs, ft) = matching_features(src_feats, tgt_feats, cfg, weights).map_err(|e| e.in_stage("hybrid stack"))?;
    let s = feature_similarity(&fs, &ft, None).map_err(|e| e.in_stage("similarity"))?;
    let z = sinkhorn(&dustbin_augment(&s, T::lit(cfg.matching.dustbin)), cfg.matching.l_iters)
        .map_err(|e| e.in_stage("sinkhorn"))?;
    let coarse = topk_select(&z, cfg.matching.k_coarse);
    let dense = dense_refine(
        &coarse,
        &src_feats.superpoints,
        &tgt_feats.superpoints,
        &src_feats.dense,
        &tgt_feats.dense,
        &cfg.matching.dense(),
    )
    .map_err(|e| e.in_stage("dense refinement"))?;
    let model = start.elapsed().as_secs_f64();

    let pose_start = Instant::now();
    let candidates =
        local_transforms(&dense.patches, src, tgt, &cfg.estimation).map_err(|e| e.in_stage("local transforms"))?;
    let selection = lgr_select(&candidates, &dense.correspondences, src, tgt, &cfg.estimation)
        .map_err(|e| e.in_stage("global selection"))?;
    let pose = pose_start.elapsed().as_secs_f64();
    Ok(Registration {
        transform: selection.transform.clone(),
        coarse,
        dense,
        selection,
        sinkhorn_residual: z.row_residual.max(z.col_residual),
        timings: StageTimings {
            model,
            pose,
            total: start.elapsed().as_secs_f64(),
        },
    })
}

/// Extracts features with `provider`, then registers. Feature extraction counts toward model time.
pub fn register<T: Real, P: FeatureProvider<T> + Sync>(
    src: &[Vec3<T>],
    tgt: &[Vec3<T>],
    provider: &P,
    cfg: &PipelineConfig,
) -> Result<Registration<T>> {
    cfg.validate()?;
    let start = Instant::now();
    let (sf, tf) = rayon::join(|| provider.extract(src, 0), || provider.extract(tgt, 1));
    let sf = sf.map_err(|e| e.in_stage("feature extraction"))?;
    let tf = tf.map_err(|e| e.in_stage("feature extraction"))?;
    let weights = StackWeights::init(&cfg.stack, cfg.seed)?;
    let extract = start.elapsed().as_secs_f64();
    let mut reg = register_with_features(src, tgt, &sf, &tf, cfg, &weights)?;
    reg.timings.model += extract;
    reg.timings.total += extract;
    Ok(reg)
}

/// Scores of one registered pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub name: String,
    pub metrics: MetricsReport,
    pub timings: StageTimings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: String,
    pub config: PipelineConfig,
    pub pairs: Vec<PairReport>,
    pub aggregate: MetricsReport,
    pub timings: StageTimings,
}

impl RunReport {
    pub fn new(config: PipelineConfig, pairs: Vec<PairReport>) -> Self {
        let metrics: Vec<MetricsReport> = pairs.iter().map(|p| p.metrics).collect();
        let mut timings = StageTimings::default();
        for p in &pairs {
            timings.model += p.timings.model;
            timings.pose += p.timings.pose;
            timings.total += p.timings.total;
        }
        Self {
            version: env!("CARGO_PKG_VERSION").to_owned(),
            config,
            aggregate: crate::geometry::metrics::aggregate(&metrics),
            pairs,
            timings,
        }
    }
}
