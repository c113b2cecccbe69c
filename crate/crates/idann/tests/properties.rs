//! Property-based invariants over the numeric primitives and selection.

mod common;

use proptest::prelude::*;

use idann::loss::{smooth_labels, softmax};
use idann::selection::{confidence_select_core, rank_candidates};

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(logits in prop::collection::vec(-50.0f64..50.0, 2..20)) {
        let p = softmax(&logits).unwrap();
        let sum: f64 = p.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn softmax_is_shift_invariant(
        logits in prop::collection::vec(-20.0f64..20.0, 2..10),
        shift in -100.0f64..100.0,
    ) {
        let a = softmax(&logits).unwrap();
        let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
        let b = softmax(&shifted).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn smoothed_targets_are_normalized(
        label in 0usize..40,
        num in 2usize..43,
        eps in 0.0f64..0.99,
    ) {
        let label = label % num;
        let t = smooth_labels(label, num, eps).unwrap();
        let sum: f64 = t.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        let lo = eps / num as f64;
        let hi = 1.0 - eps + eps / num as f64;
        for (i, v) in t.iter().enumerate() {
            if i == label {
                prop_assert!((v - hi).abs() < 1e-12);
            } else {
                prop_assert!((v - lo).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn confidence_selection_is_permutation_invariant(
        rows in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 4), 1..30),
        p in 1usize..10,
    ) {
        // Normalize to posteriors with unique ids 0..n.
        let posts: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                let s: f64 = r.iter().sum();
                r.iter().map(|v| v / s).collect()
            })
            .collect();
        let ids: Vec<u64> = (0..posts.len() as u64).collect();
        let p = p.min(posts.len());

        let ranked = rank_candidates(&ids, &posts).unwrap();
        let base: Vec<u64> = confidence_select_core(&ranked, p)
            .iter()
            .map(|c| c.sample_id)
            .collect();

        // Present the same candidates in reversed order.
        let rev_ids: Vec<u64> = ids.iter().rev().copied().collect();
        let rev_posts: Vec<Vec<f64>> = posts.iter().rev().cloned().collect();
        let ranked_rev = rank_candidates(&rev_ids, &rev_posts).unwrap();
        let perm: Vec<u64> = confidence_select_core(&ranked_rev, p)
            .iter()
            .map(|c| c.sample_id)
            .collect();

        prop_assert_eq!(base, perm);
    }
}
