use proptest::prelude::*;
use tasgen::metrics::{f1_score, oa_kappa, relabel_counts, ConfusionMatrix, FlagCounts};

fn flag_pairs() -> impl Strategy<Value = (Vec<bool>, Vec<bool>)> {
    (1usize..200).prop_flat_map(|n| {
        (
            prop::collection::vec(any::<bool>(), n),
            prop::collection::vec(any::<bool>(), n),
        )
    })
}

proptest! {
    #[test]
    fn f1_lies_in_unit_interval_and_is_symmetric((pred, truth) in flag_pairs()) {
        let a = f1_score(&pred, &truth).unwrap();
        let b = f1_score(&truth, &pred).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn f1_matches_count_formula((pred, truth) in flag_pairs()) {
        let c = FlagCounts::from_flags(&pred, &truth).unwrap();
        let expected = if c.tp == 0 { 0.0 } else { 2.0 * c.tp as f64 / (2 * c.tp + c.fp + c.fn_) as f64 };
        prop_assert!((c.f1() - expected).abs() < 1e-12);
    }

    #[test]
    fn perfect_agreement_gives_unit_oa_and_kappa(diag in prop::collection::vec(1u64..50, 2..5)) {
        let k = diag.len();
        let counts: Vec<Vec<u64>> = (0..k).map(|i| (0..k).map(|j| if i == j { diag[i] } else { 0 }).collect()).collect();
        let (oa, kappa) = oa_kappa(&ConfusionMatrix::from_counts(counts).unwrap()).unwrap();
        prop_assert!((oa - 1.0).abs() < 1e-12);
        prop_assert!((kappa - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kappa_never_exceeds_oa(counts in prop::collection::vec(prop::collection::vec(0u64..30, 3), 3)) {
        let cm = ConfusionMatrix::from_counts(counts).unwrap();
        if let Ok((oa, kappa)) = oa_kappa(&cm) {
            prop_assert!(kappa <= oa + 1e-12);
        }
    }

    #[test]
    fn unchanged_prediction_has_no_relabel_hits(truth in prop::collection::vec(0usize..3, 1..100)) {
        let names = ["a", "b", "c"];
        let truth: Vec<String> = truth.iter().map(|&i| names[i].to_string()).collect();
        let pred = vec!["a".to_string(); truth.len()];
        let c = relabel_counts(&pred, &truth, "a").unwrap();
        prop_assert_eq!(c.tp + c.fp, 0);
        prop_assert_eq!(c.fn_ as usize, truth.iter().filter(|t| *t != "a").count());
    }
}
