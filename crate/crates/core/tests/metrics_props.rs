mod common;

use ndarray::Array2;
use popusense::evalkit::{auroc, auroc_pair_count, average_precision, best_dice, pixel_auroc, ScoredSet};
use proptest::prelude::*;

use common::{brute_ap, brute_auroc, brute_best_dice, brute_pairs};

fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (1usize..=8).prop_flat_map(|n| {
        (prop::collection::vec((0u8..5).prop_map(|v| v as f64 * 0.25), n), prop::collection::vec(any::<bool>(), n))
    })
}

/// One or two maps of up to 2x2 pixels (at most 8 pixels in total).
fn maps() -> impl Strategy<Value = Vec<(Array2<f64>, Array2<bool>)>> {
    prop::collection::vec(
        (1usize..=2, 1usize..=2).prop_flat_map(|(h, w)| {
            (
                prop::collection::vec((0u8..6).prop_map(|v| v as f64 / 5.0), h * w),
                prop::collection::vec(any::<bool>(), h * w),
            )
                .prop_map(move |(s, m)| {
                    (Array2::from_shape_vec((h, w), s).unwrap(), Array2::from_shape_vec((h, w), m).unwrap())
                })
        }),
        1..=2,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn auroc_matches_pair_enumeration((s, l) in scored()) {
        let set = ScoredSet::new(s.clone(), l.clone()).unwrap();
        prop_assert_eq!(auroc_pair_count(&set), brute_pairs(&s, &l));
        match brute_auroc(&s, &l) {
            Some(want) => prop_assert_eq!(auroc(&set).unwrap(), want),
            None => prop_assert!(auroc(&set).is_err()),
        }
    }

    #[test]
    fn ap_matches_staircase((s, l) in scored()) {
        let set = ScoredSet::new(s.clone(), l.clone()).unwrap();
        match brute_ap(&s, &l) {
            Some(want) => prop_assert!((average_precision(&set).unwrap() - want).abs() < 1e-12),
            None => prop_assert!(average_precision(&set).is_err()),
        }
    }

    #[test]
    fn pixel_metrics_match_brute_force(pairs in maps()) {
        let (m, k): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let scores: Vec<f64> = m.iter().flat_map(|a| a.iter().copied()).collect();
        let truth: Vec<bool> = k.iter().flat_map(|a| a.iter().copied()).collect();
        match brute_auroc(&scores, &truth) {
            Some(want) => prop_assert!((pixel_auroc(&m, &k).unwrap() - want).abs() < 1e-12),
            None => prop_assert!(pixel_auroc(&m, &k).is_err()),
        }
        match brute_best_dice(&scores, &truth) {
            Some(want) => prop_assert!((best_dice(&m, &k).unwrap() - want).abs() < 1e-12),
            None => prop_assert!(best_dice(&m, &k).is_err()),
        }
    }

    #[test]
    fn auroc_invariant_under_increasing_maps((s, l) in scored(), a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let base = ScoredSet::new(s.clone(), l.clone()).unwrap();
        let moved = ScoredSet::new(s.iter().map(|v| (a * v + b).exp()).collect(), l).unwrap();
        prop_assert_eq!(auroc_pair_count(&base), auroc_pair_count(&moved));
    }

    #[test]
    fn flipping_labels_complements_auroc(n in 2usize..=8, seed in any::<u64>()) {
        let s: Vec<f64> = (0..n).map(|i| i as f64 + (seed % 7) as f64 * 0.01).collect();
        let l: Vec<bool> = (0..n).map(|i| (seed >> i) & 1 == 1).collect();
        let flipped: Vec<bool> = l.iter().map(|b| !b).collect();
        let (Ok(a), Ok(b)) = (
            auroc(&ScoredSet::new(s.clone(), l).unwrap()),
            auroc(&ScoredSet::new(s, flipped).unwrap()),
        ) else {
            return Ok(());
        };
        prop_assert!((a + b - 1.0).abs() < 1e-15);
    }

    #[test]
    fn metrics_stay_in_unit_interval((s, l) in scored()) {
        let set = ScoredSet::new(s, l).unwrap();
        for v in [auroc(&set), average_precision(&set)].into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}
