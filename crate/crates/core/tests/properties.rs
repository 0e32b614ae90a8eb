//! Invariants over randomized inputs.

mod common;

use cmha_core::attention::{self_attention, self_attention_scores, AttentionKind, AttentionLayer};
use cmha_core::correspondence::Correspondence;
use cmha_core::embedding::{pair_geometric_embedding, EmbeddingConfig, EmbeddingWeights, PairEmbedding};
use cmha_core::estimation::weighted_procrustes;
use cmha_core::geometry::ply::{read_ply, write_ply, PlyPrecision};
use cmha_core::geometry::TransformRecord;
use cmha_core::matching::{dustbin_augment, sinkhorn};
use cmha_core::synth::{generate_scene, SceneConfig};
use cmha_core::tensor::mat3::{self, Vec3};
use cmha_core::tensor::ProjectionSet;
use cmha_core::{
    matmul, softmax_rows, svd3, transform_errors, CorrespondenceSet, Level, Matrix, PointCloud, RigidTransform,
    SceneRng,
};
use common::*;
use proptest::prelude::*;

fn finite_row(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-20.0..20.0f64, len)
}

fn embedding_cfg() -> EmbeddingConfig {
    EmbeddingConfig {
        d: 8,
        ..Default::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_commutes_with_column_permutation(row in finite_row(6), seed in any::<u64>()) {
        let mut perm: Vec<usize> = (0..6).collect();
        SceneRng::new(seed).shuffle(&mut perm);
        let a = softmax_rows(&Matrix::from_rows(&[row.clone()]).unwrap()).unwrap();
        let permuted: Vec<f64> = perm.iter().map(|&k| row[k]).collect();
        let b = softmax_rows(&Matrix::from_rows(&[permuted]).unwrap()).unwrap();
        for (j, &k) in perm.iter().enumerate() {
            prop_assert!((b[(0, j)] - a[(0, k)]).abs() < 1e-15);
        }
        let total: f64 = a.row(0).iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn matmul_is_associative(seed in any::<u64>(), n in 1usize..6, m in 1usize..6, k in 1usize..6, l in 1usize..6) {
        let mut rng = SceneRng::new(seed);
        let a = random_matrix(&mut rng, n, m, 1.0);
        let b = random_matrix(&mut rng, m, k, 1.0);
        let c = random_matrix(&mut rng, k, l, 1.0);
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right) < 1e-12);
    }

    #[test]
    fn orthogonal_matrices_have_unit_singular_values(seed in any::<u64>()) {
        let r = random_rotation(&mut SceneRng::new(seed));
        let svd = svd3(&r);
        for s in svd.sigma {
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn geometric_embedding_is_rigid_invariant(seed in any::<u64>()) {
        let mut rng = SceneRng::new(seed);
        let coords = random_points(&mut rng, 8, 1.0);
        let t = random_transform(&mut rng, 5.0);
        let moved: Vec<Vec3<f64>> = coords.iter().map(|&p| t.apply(p)).collect();
        let w = EmbeddingWeights::init(8, seed);
        let a = pair_geometric_embedding(&coords, &embedding_cfg(), &w).unwrap();
        let b = pair_geometric_embedding(&moved, &embedding_cfg(), &w).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-8);
    }

    #[test]
    fn self_attention_is_permutation_equivariant(seed in any::<u64>()) {
        let mut rng = SceneRng::new(seed);
        let n = 6;
        let coords = random_points(&mut rng, n, 1.0);
        let f = random_matrix(&mut rng, n, 8, 1.0);
        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        let w = EmbeddingWeights::init(8, seed);
        let layer = AttentionLayer::init(AttentionKind::SelfAttention, 8, seed).unwrap();
        let emb = pair_geometric_embedding(&coords, &embedding_cfg(), &w).unwrap();
        let out = self_attention(&f, &emb, &layer).unwrap();
        let permuted_emb: PairEmbedding<f64> = emb.permuted(&perm);
        let out_p = self_attention(&f.select_rows(&perm), &permuted_emb, &layer).unwrap();
        prop_assert!(out_p.max_abs_diff(&out.select_rows(&perm)) < 1e-12);
    }

    #[test]
    fn zero_value_projection_leaves_features(seed in any::<u64>()) {
        let mut rng = SceneRng::new(seed);
        let f = random_matrix(&mut rng, 5, 8, 3.0);
        let emb = PairEmbedding::from_matrix(5, random_matrix(&mut rng, 25, 8, 1.0)).unwrap();
        let mut layer = AttentionLayer::init(AttentionKind::SelfAttention, 8, seed).unwrap();
        layer.proj.w_v = Matrix::zeros(8, 8);
        prop_assert_eq!(self_attention(&f, &emb, &layer).unwrap(), f);
    }

    #[test]
    fn sinkhorn_balances_interior_sums(seed in any::<u64>(), np in 1usize..20, nq in 1usize..20, z in -2.0..2.0f64) {
        let mut rng = SceneRng::new(seed);
        let s = random_matrix(&mut rng, np, nq, 3.0);
        let out = sinkhorn(&dustbin_augment(&s, z), 50).unwrap();
        for i in 0..np {
            let sum: f64 = out.z.row(i).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6, "row {} sums to {}", i, sum);
        }
        for j in 0..nq {
            let sum: f64 = (0..=np).map(|i| out.z[(i, j)]).sum();
            prop_assert!((sum - 1.0).abs() < 1e-6, "column {} sums to {}", j, sum);
        }
        prop_assert!(out.z.as_slice().iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn procrustes_recovers_exact_transforms(seed in any::<u64>(), n in 3usize..40) {
        let mut rng = SceneRng::new(seed);
        let gt = random_transform(&mut rng, 3.0);
        let src = random_points(&mut rng, n, 1.0);
        let tgt: Vec<Vec3<f64>> = src.iter().map(|&p| gt.apply(p)).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.range(0.1, 1.0)).collect();
        let fit = weighted_procrustes(&src, &tgt, &w).unwrap();
        let (rre, rte) = transform_errors(&fit, &gt);
        prop_assert!(rre < 1e-6 && rte < 1e-9, "rre {} rte {}", rre, rte);
    }

    #[test]
    fn compose_and_inverse_agree(seed in any::<u64>()) {
        let mut rng = SceneRng::new(seed);
        let a = random_transform(&mut rng, 3.0);
        let b = random_transform(&mut rng, 3.0);
        let p = random_points(&mut rng, 1, 2.0)[0];
        let ab = a.compose(&b);
        prop_assert!(mat3::dist(ab.apply(p), a.apply(b.apply(p))) < 1e-12);
        prop_assert!(mat3::dist(a.inverse().apply(a.apply(p)), p) < 1e-12);
        let (rre, rte) = transform_errors(&ab.compose(&ab.inverse()), &RigidTransform::identity());
        prop_assert!(rre < 1e-6 && rte < 1e-12);
    }

    #[test]
    fn transform_json_round_trip_is_bit_exact(seed in any::<u64>()) {
        let t = random_transform(&mut SceneRng::new(seed), 10.0);
        let json = serde_json::to_string(&TransformRecord::from(&t)).unwrap();
        let back: TransformRecord = serde_json::from_str(&json).unwrap();
        prop_assert_eq!(back.to_transform::<f64>().unwrap(), t);
    }

    #[test]
    fn correspondence_csv_round_trip(pairs in prop::collection::vec((0usize..500, 0usize..500, 0.0..1.0f64), 0..40)) {
        let set = CorrespondenceSet::from_pairs(
            pairs.iter().map(|&(s, t, c)| Correspondence::new(s, t, c)).collect(),
            Level::Dense,
        );
        let mut buf = Vec::new();
        set.write_csv(&mut buf).unwrap();
        let back = CorrespondenceSet::<f64>::read_csv(buf.as_slice(), Level::Dense).unwrap();
        prop_assert_eq!(back.index_pairs(), set.index_pairs());
        for (a, b) in back.iter().zip(set.iter()) {
            prop_assert!((a.confidence - b.confidence).abs() <= 1e-8 * b.confidence.abs().max(1e-300));
        }
    }

    #[test]
    fn double_precision_ply_round_trip(seed in any::<u64>(), n in 1usize..50, d in 0usize..4) {
        let mut rng = SceneRng::new(seed);
        let pts = random_points(&mut rng, n, 100.0);
        let cloud = if d == 0 {
            PointCloud::new(pts).unwrap()
        } else {
            PointCloud::with_features(pts, random_matrix(&mut rng, n, d, 5.0)).unwrap()
        };
        let mut buf = Vec::new();
        write_ply(&cloud, PlyPrecision::Float64, &mut buf).unwrap();
        prop_assert_eq!(read_ply::<f64, _>(buf.as_slice()).unwrap(), cloud);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn scene_generation_is_deterministic(seed in 0u64..1000, overlap in 0.2..0.9f64) {
        let cfg = SceneConfig {
            n_points: 400,
            n_superpoints: 16,
            overlap_fraction: overlap,
            seed,
            ..Default::default()
        };
        let a = generate_scene(&cfg).unwrap();
        let b = generate_scene(&cfg).unwrap();
        prop_assert_eq!(&a.src, &b.src);
        prop_assert_eq!(&a.tgt, &b.tgt);
        prop_assert_eq!(&a.gt, &b.gt);
        prop_assert_eq!(&a.src_super, &b.src_super);
        prop_assert_eq!(a.gt_correspondences.index_pairs(), b.gt_correspondences.index_pairs());
        prop_assert_eq!(a.cloud_features(), b.cloud_features());
    }
}

#[test]
fn scaling_breaks_embedding_invariance() {
    let mut rng = SceneRng::new(9);
    let coords = random_points(&mut rng, 8, 1.0);
    let scaled: Vec<Vec3<f64>> = coords.iter().map(|p| p.map(|c| 2.0 * c)).collect();
    let w = EmbeddingWeights::init(8, 9);
    let a = pair_geometric_embedding(&coords, &embedding_cfg(), &w).unwrap();
    let b = pair_geometric_embedding(&scaled, &embedding_cfg(), &w).unwrap();
    assert!(a.max_abs_diff(&b) > 1e-3);
    let f = random_matrix(&mut rng, 8, 8, 1.0);
    let layer = AttentionLayer::init(AttentionKind::SelfAttention, 8, 9).unwrap();
    let sa = self_attention_scores(&f, &a, &layer).unwrap();
    let sb = self_attention_scores(&f, &b, &layer).unwrap();
    assert!(sa.max_abs_diff(&sb) > 1e-3);
    let zero = ProjectionSet::<f64>::zeros(8);
    assert_eq!(zero.dim(), 8);
}
