use std::collections::HashSet;

use docrec::embed::featurize;
use docrec::expertise::{AttentionMode, DoctorEncoder};
use docrec::metrics::JudgedRanking;
use docrec::ranker::{sample_negatives, RankResult};
use docrec::rng::seeded;
use docrec::tensor::{ParamStore, Tensor};
use proptest::prelude::*;

fn ranking() -> impl Strategy<Value = (Vec<u32>, HashSet<u32>)> {
    (1usize..12).prop_flat_map(|n| {
        let ids = Just((0..n as u32).collect::<Vec<_>>()).prop_shuffle();
        let rel = proptest::collection::hash_set(0..n as u32, 1..=n);
        (ids, rel)
    })
}

proptest! {
    #[test]
    fn metrics_stay_in_range((ids, rel) in ranking()) {
        let j = JudgedRanking::new(ids.clone(), rel).unwrap();
        let ap = j.average_precision();
        prop_assert!((0.0..=1.0).contains(&ap));
        let p1 = j.precision_at_n(1);
        prop_assert!(p1 == 0.0 || p1 == 1.0);
        let err = j.err_at_n(5);
        prop_assert!((0.0..1.0).contains(&err));
    }

    #[test]
    fn moving_gold_up_never_lowers_metrics(n in 2usize..10, from in 1usize..10) {
        let from = from.min(n - 1);
        let ids: Vec<usize> = (0..n).collect();
        let mut better = ids.clone();
        better.swap(from, from - 1);
        let a = JudgedRanking::single(ids, from).unwrap();
        let b = JudgedRanking::single(better, from).unwrap();
        prop_assert!(b.average_precision() >= a.average_precision());
        prop_assert!(b.err_at_n(5) >= a.err_at_n(5));
    }

    #[test]
    fn featurize_ignores_order(tokens in proptest::collection::vec("[a-z]{1,5}", 0..40), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut shuffled = tokens.clone();
        shuffled.shuffle(&mut seeded(seed));
        let a = featurize(&tokens, 97);
        let b = featurize(&shuffled, 97);
        prop_assert_eq!(&a, &b);
        if tokens.is_empty() {
            prop_assert_eq!(a.norm(), 0.0);
        } else {
            prop_assert!((a.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn negatives_exclude_gold(pool in 2usize..60, gold in 0usize..60, ratio in 1usize..20, seed in any::<u64>()) {
        let gold = gold % pool;
        let ids: Vec<usize> = (0..pool).collect();
        match sample_negatives(&ids, &gold, ratio, &mut seeded(seed)) {
            Ok(neg) => {
                prop_assert_eq!(neg.len(), ratio);
                prop_assert!(!neg.contains(&gold));
                prop_assert_eq!(neg.iter().collect::<HashSet<_>>().len(), ratio);
            }
            Err(_) => prop_assert!(ratio > pool - 1),
        }
    }

    #[test]
    fn rank_result_is_sorted_permutation(scores in proptest::collection::vec(0.0f64..1.0, 1..30)) {
        let entries: Vec<(String, f64)> = scores
            .iter()
            .enumerate()
            // coarse rounding forces ties
            .map(|(i, s)| (format!("d{i:03}"), (s * 4.0).round() / 4.0))
            .collect();
        let r = RankResult::from_scores(entries.clone());
        prop_assert_eq!(r.entries.len(), entries.len());
        for w in r.entries.windows(2) {
            prop_assert!(w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0));
        }
    }

    #[test]
    fn attention_rows_are_distributions(n in 1usize..8, seed in any::<u64>(), heads in prop::sample::select(vec![1usize, 2, 3, 6])) {
        let mut rng = seeded(seed);
        for mode in AttentionMode::ALL {
            let mut store = ParamStore::new();
            let enc = DoctorEncoder::init(&mut store, mode, 6, heads, seed).unwrap();
            let p = Tensor::xavier(1, 6, &mut rng).scale(3.0);
            let d = Tensor::xavier(n, 6, &mut rng).scale(3.0);
            let e = enc.embed(&store, Some(&p), Some(&d)).unwrap();
            for r in 0..e.attention_maps.rows() {
                let s: f64 = e.attention_maps.row(r).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
                prop_assert!(e.attention_maps.row(r).iter().all(|w| *w >= 0.0));
            }
            prop_assert!(e.vector.is_finite());
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(data in proptest::collection::vec(-50.0f64..50.0, 12)) {
        let t = Tensor::from_vec(3, 4, data).unwrap().row_softmax();
        for r in 0..3 {
            prop_assert!((t.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
