use egosag::config::DiceVariant;
use egosag::losses::{bce_loss, dice_loss, hungarian_assign, kl_rows};
use egosag::metrics::{evaluate_dataset, mask_iou, ClassMode, FinalPrediction, GtSample};
use egosag::pointcloud::{expand_mask, farthest_point_sample, interpolation_weights, pool_gt_mask, Point3, SuperpointPartition};
use ndarray::Array2;
use proptest::prelude::*;

fn matrix(max: usize) -> impl Strategy<Value = Array2<f64>> {
    (1..=max, 1..=max).prop_flat_map(|(r, c)| {
        prop::collection::vec(-5.0f64..5.0, r * c).prop_map(move |v| Array2::from_shape_vec((r, c), v).unwrap())
    })
}

fn cloud(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<Point3>> {
    prop::collection::vec(prop::array::uniform3(-2.0f32..2.0), n)
}

proptest! {
    #[test]
    fn assignment_is_a_partial_permutation(cost in matrix(6)) {
        let m = hungarian_assign(&cost).unwrap();
        let (q, j) = cost.dim();
        prop_assert_eq!(m.pairs.len(), q.min(j));
        let mut rows: Vec<usize> = m.pairs.iter().map(|p| p.0).collect();
        let mut cols: Vec<usize> = m.pairs.iter().map(|p| p.1).collect();
        rows.dedup();
        cols.sort();
        cols.dedup();
        prop_assert_eq!(rows.len(), m.pairs.len());
        prop_assert_eq!(cols.len(), m.pairs.len());
        let sum: f64 = m.pairs.iter().map(|&(a, b)| cost[[a, b]]).sum();
        prop_assert!((sum - m.total_cost).abs() < 1e-9);
        prop_assert_eq!(m.unmatched_preds.len(), q - m.pairs.len());
        // Never worse than the diagonal assignment.
        let diag: f64 = (0..q.min(j)).map(|i| cost[[i, i]]).sum();
        prop_assert!(m.total_cost <= diag + 1e-9);
    }

    #[test]
    fn assignment_ignores_constant_offsets(cost in matrix(5), shift in -3.0f64..3.0) {
        let a = hungarian_assign(&cost).unwrap();
        let b = hungarian_assign(&cost.mapv(|v| v + shift)).unwrap();
        prop_assert!((b.total_cost - a.total_cost - shift * a.pairs.len() as f64).abs() < 1e-9);
    }

    #[test]
    fn mask_iou_is_a_bounded_symmetric_similarity(
        a in prop::collection::vec(any::<bool>(), 12),
        b in prop::collection::vec(any::<bool>(), 12),
    ) {
        let ab = mask_iou(&a, &b).unwrap();
        prop_assert_eq!(ab, mask_iou(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        if a.iter().any(|&x| x) {
            prop_assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        }
    }

    #[test]
    fn pointwise_losses_stay_in_range(
        pairs in prop::collection::vec((0.0f64..=1.0, any::<bool>()), 1..20),
    ) {
        let (p, g): (Vec<f64>, Vec<bool>) = pairs.into_iter().unzip();
        let d = dice_loss(&p, &g, DiceVariant::Standard).unwrap();
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&d));
        prop_assert!(bce_loss(&p, &g, 1e-6).unwrap() >= 0.0);
    }

    #[test]
    fn kl_is_non_negative(a in matrix(4)) {
        let b = a.mapv(|v| (v * 1.7).sin());
        prop_assert!(kl_rows(&a, &b) >= -1e-12);
        prop_assert!(kl_rows(&a, &a).abs() < 1e-12);
    }

    #[test]
    fn interpolation_rows_are_convex(src in cloud(1..20), dst in cloud(1..10), k in 1usize..5) {
        let w = interpolation_weights(&src, &dst, k, 1e-8).unwrap();
        prop_assert_eq!(w.rows.len(), dst.len());
        for row in &w.rows {
            prop_assert_eq!(row.len(), k.min(src.len()));
            prop_assert!(row.iter().all(|&(s, x)| s < src.len() && x >= 0.0));
            prop_assert!((row.iter().map(|r| r.1).sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn farthest_point_sample_is_distinct(points in cloud(1..40), n in 1usize..40, seed in 0usize..40) {
        let n = n.min(points.len());
        let seed = seed % points.len();
        let idx = farthest_point_sample(&points, n, seed).unwrap();
        prop_assert_eq!(idx.len(), n);
        prop_assert_eq!(idx[0], seed);
        let mut sorted = idx.clone();
        sorted.sort();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), n);
    }

    #[test]
    fn superpoint_masks_round_trip(assign in prop::collection::vec(0usize..6, 1..30), on in prop::collection::vec(any::<bool>(), 6)) {
        // Relabel densely so every superpoint is non-empty.
        let mut labels: Vec<usize> = assign.clone();
        labels.sort();
        labels.dedup();
        let dense: Vec<usize> = assign.iter().map(|a| labels.binary_search(a).unwrap()).collect();
        let sp = SuperpointPartition::new(dense).unwrap();
        let mask: Vec<f64> = (0..sp.count()).map(|s| on[s] as u8 as f64).collect();
        let points = expand_mask(&mask, &sp).unwrap();
        prop_assert_eq!(points.len(), sp.n_points());
        let back = pool_gt_mask(&points.iter().map(|&v| v > 0.5).collect::<Vec<_>>(), &sp).unwrap();
        prop_assert_eq!(back, mask.iter().map(|&v| v > 0.5).collect::<Vec<_>>());
    }

    #[test]
    fn metrics_are_percentages_and_perfect_predictions_score_full(
        scenes in prop::collection::vec((prop::collection::vec(prop::collection::vec(any::<bool>(), 10), 1..3), 0usize..3), 1..4),
    ) {
        let gts: Vec<GtSample> = scenes
            .iter()
            .map(|(masks, c)| GtSample { masks: masks.clone(), classes: vec![*c; masks.len()] })
            .collect();
        let preds: Vec<FinalPrediction> = scenes
            .iter()
            .map(|(masks, c)| FinalPrediction {
                point_masks: masks.clone(),
                scores: (0..masks.len()).map(|i| 1.0 - 0.1 * i as f64).collect(),
                affordance_id: *c,
            })
            .collect();
        let r = evaluate_dataset(&preds, &gts, ClassMode::Aware).unwrap();
        for v in [r.map, r.ap50, r.ap25, r.mrc, r.rc50, r.rc25] {
            prop_assert!((0.0..=100.0 + 1e-9).contains(&v));
        }
        // Empty gt masks can never be matched; otherwise every region is found.
        if gts.iter().all(|g| g.masks.iter().all(|m| m.iter().any(|&x| x))) {
            let all_distinct = gts.iter().all(|g| g.masks.len() < 2 || g.masks[0] != g.masks[1]);
            if all_distinct {
                prop_assert!((r.ap25 - 100.0).abs() < 1e-9, "AP25 {}", r.ap25);
            }
        }
    }
}
