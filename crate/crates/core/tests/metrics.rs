use mohs_core::metrics::{aggregate_slide, dice, pixel_auc, roc_auc, Confusion, MetricsError};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Probability that a random positive outranks a random negative, ties ½.
fn concordance(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                pairs += 1.0;
                num += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / pairs
}

fn dice_oracle(a: &[u8], b: &[u8]) -> f64 {
    let pa: std::collections::BTreeSet<usize> = (0..a.len()).filter(|&i| a[i] != 0).collect();
    let pb: std::collections::BTreeSet<usize> = (0..b.len()).filter(|&i| b[i] != 0).collect();
    if pa.is_empty() && pb.is_empty() {
        return 1.0;
    }
    2.0 * pa.intersection(&pb).count() as f64 / (pa.len() + pb.len()) as f64
}

fn scored_labels() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..=200, any::<u64>(), 1u32..6).prop_filter_map("needs both classes", |(n, seed, levels)| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        // Coarse score grids force ties.
        let grid = 1u32 << (levels * 2);
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(0..grid) as f64 / grid as f64).collect();
        let labels: Vec<bool> = (0..n).map(|_| r.random_bool(0.4)).collect();
        (labels.iter().any(|&l| l) && labels.iter().any(|&l| !l)).then_some((scores, labels))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn trapezoid_auc_equals_concordance((scores, labels) in scored_labels()) {
        let c = roc_auc(&scores, &labels).unwrap();
        prop_assert!((c.auc - concordance(&scores, &labels)).abs() <= 1e-12);
        let first = &c.points[0];
        let last = c.points.last().unwrap();
        prop_assert_eq!((first.fpr, first.tpr), (0.0, 0.0));
        prop_assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        for w in c.points.windows(2) {
            prop_assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
            prop_assert!(w[1].threshold < w[0].threshold);
        }
        let area: f64 = c.points.windows(2).map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0).sum();
        prop_assert!((area - c.auc).abs() <= 1e-12);
    }

    #[test]
    fn dice_matches_set_oracle(seed in any::<u64>(), n in 0usize..300) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<u8> = (0..n).map(|_| r.random_bool(0.3) as u8).collect();
        let b: Vec<u8> = (0..n).map(|_| r.random_bool(0.3) as u8).collect();
        prop_assert_eq!(dice(&a, &b).unwrap(), dice_oracle(&a, &b));
        prop_assert_eq!(dice(&a, &b).unwrap(), dice(&b, &a).unwrap());
        if a.iter().any(|&v| v != 0) {
            prop_assert_eq!(dice(&a, &a).unwrap(), 1.0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn auc_is_rank_invariant((scores, labels) in scored_labels()) {
        let base = roc_auc(&scores, &labels).unwrap().auc;
        let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
        prop_assert_eq!(roc_auc(&warped, &labels).unwrap().auc, base);
    }

    #[test]
    fn auc_complement_sums_to_one((scores, labels) in scored_labels()) {
        let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
        let sum = roc_auc(&scores, &labels).unwrap().auc + roc_auc(&scores, &flipped).unwrap().auc;
        prop_assert!((sum - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn confusion_counts_cover_every_sample((scores, labels) in scored_labels()) {
        let c = Confusion::from_scores(&scores, &labels, 0.5);
        prop_assert_eq!(c.total() as usize, scores.len());
    }
}

#[test]
fn subsampled_pixel_auc_tracks_full_population() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let n = 64 * 64;
    let mask: Vec<u8> = (0..n).map(|i| ((i % 64) > 40 && (i / 64) > 20) as u8).collect();
    let probs: Vec<f32> = mask.iter().map(|&m| (0.35 * m as f32 + r.random_range(0.0f32..0.7)).min(1.0)).collect();
    let full = pixel_auc(&probs, &mask, n, 0).unwrap();
    for seed in 0..5 {
        let sub = pixel_auc(&probs, &mask, 1000, seed).unwrap();
        assert!((sub - full).abs() <= 0.02, "{sub} vs {full}");
    }
}

#[test]
fn single_class_and_empty_inputs_are_errors() {
    assert_eq!(pixel_auc(&[0.2, 0.4], &[0, 0], 10, 0), Err(MetricsError::SingleClass));
    assert_eq!(aggregate_slide(&[], &[]), Err(MetricsError::NoValidPatches));
    assert!(matches!(roc_auc(&[f64::NAN, 0.1], &[true, false]), Err(MetricsError::NonFinite(0))));
}
