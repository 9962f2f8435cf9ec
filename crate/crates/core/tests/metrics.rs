mod common;

use common::metric_oracle::{exhaustive_multisets, exhaustive_ordered, library, oracle};
use proptest::prelude::*;
use reef_lora::metrics::{confusion_counts, macro_f1, match_ratio, micro_f1};

#[test]
fn ordered_batches_match_oracle() {
    for (classes, max_n) in [(1, 6), (2, 4), (3, 2)] {
        for n in 1..=max_n {
            let (tally, first) = exhaustive_ordered(classes, n);
            assert_eq!(tally.mismatches, 0, "C={classes} N={n}: {first:?}");
        }
    }
}

#[test]
fn small_multisets_match_oracle() {
    for classes in 1..=3 {
        for n in 1..=4 {
            let (tally, first) = exhaustive_multisets(classes, n);
            assert!(tally.checked > 0);
            assert_eq!(tally.mismatches, 0, "C={classes} N={n}: {first:?}");
        }
    }
}

fn batch(classes: usize) -> impl Strategy<Value = (Vec<Vec<bool>>, Vec<Vec<bool>>)> {
    (1usize..12).prop_flat_map(move |n| {
        (
            prop::collection::vec(prop::collection::vec(any::<bool>(), classes), n),
            prop::collection::vec(prop::collection::vec(any::<bool>(), classes), n),
        )
    })
}

proptest! {
    #[test]
    fn larger_batches_match_oracle((p, t) in batch(8)) {
        prop_assert_eq!(library(&p, &t), oracle(&p, &t, 8));
    }

    #[test]
    fn class_permutation_leaves_f1_unchanged((p, t) in batch(5), shift in 0usize..5, flip in any::<bool>()) {
        let perm: Vec<usize> = (0..5)
            .map(|i| if flip { (4 - i + shift) % 5 } else { (i + shift) % 5 })
            .collect();
        let apply = |rows: &[Vec<bool>]| -> Vec<Vec<bool>> {
            rows.iter().map(|r| perm.iter().map(|&i| r[i]).collect()).collect()
        };
        let base = confusion_counts(&p, &t).unwrap();
        let moved = confusion_counts(&apply(&p), &apply(&t)).unwrap();
        prop_assert_eq!(micro_f1(&base), micro_f1(&moved));
        let (a, b) = (macro_f1(&base).macro_f1, macro_f1(&moved).macro_f1);
        prop_assert!((a - b).abs() <= 1e-15, "{} vs {}", a, b);
    }

    #[test]
    fn exact_match_is_stricter_than_any_class((p, t) in batch(4)) {
        let mr = match_ratio(&p, &t).unwrap();
        let c = confusion_counts(&p, &t).unwrap();
        for i in 0..4 {
            let acc = (c.tp[i] + c.tn[i]) as f64 / c.total() as f64;
            prop_assert!(mr <= acc);
        }
    }

    #[test]
    fn outputs_are_bounded_and_conventional((p, t) in batch(3)) {
        let c = confusion_counts(&p, &t).unwrap();
        prop_assert!(c.is_well_formed());
        let ma = macro_f1(&c);
        let mi = micro_f1(&c);
        for v in ma.per_class_f1.iter().chain([&ma.macro_f1, &mi.micro_f1, &mi.micro_precision, &mi.micro_recall]) {
            prop_assert!((0.0..=1.0).contains(v));
        }
        if c.tp.iter().sum::<u64>() == 0 {
            prop_assert_eq!(mi.micro_f1, 0.0);
        }
        if c.fp.iter().sum::<u64>() == c.fn_.iter().sum::<u64>() {
            prop_assert_eq!(mi.micro_precision, mi.micro_recall);
        }
    }
}

