use std::collections::HashMap;

use proptest::prelude::*;
use seqtrans::data::{
    leave_one_out_split, make_batches, ncore_filter, sliding_windows, FilterConfig, FilterMode, InteractionEvent,
};
use seqtrans::eval::{hit_at_n, ndcg_at_n, rank_outcome, TieRule};
use seqtrans::tensor::softmax;

fn events_strategy() -> impl Strategy<Value = Vec<InteractionEvent>> {
    prop::collection::vec((0u8..12, 0u8..15, 0u64..50), 0..200).prop_map(|raw| {
        raw.into_iter()
            .map(|(u, i, t)| InteractionEvent {
                user: format!("u{u}"),
                item: format!("i{i}"),
                category: format!("c{}", i % 4),
                timestamp: t,
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(row in prop::collection::vec(-50.0f64..50.0, 1..40)) {
        let p = softmax(&row);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn fixpoint_filter_is_idempotent(events in events_strategy(), k in 1usize..5) {
        let cfg = FilterConfig { item_min: k, user_min: k, user_min_records: 0, mode: FilterMode::Fixpoint };
        let once = ncore_filter(&events, &cfg);
        let twice = ncore_filter(&once, &cfg);
        prop_assert_eq!(&once, &twice);
        let mut users: HashMap<&str, std::collections::HashSet<&str>> = HashMap::new();
        let mut items: HashMap<&str, std::collections::HashSet<&str>> = HashMap::new();
        for e in &once {
            users.entry(&e.user).or_default().insert(&e.item);
            items.entry(&e.item).or_default().insert(&e.user);
        }
        prop_assert!(users.values().all(|s| s.len() >= k));
        prop_assert!(items.values().all(|s| s.len() >= k));
    }

    #[test]
    fn split_reconstructs_sequences(events in events_strategy()) {
        let (ds, report) = leave_one_out_split(&events);
        let mut per_user: HashMap<&str, usize> = HashMap::new();
        for e in &events {
            *per_user.entry(&e.user).or_default() += 1;
        }
        let kept = per_user.values().filter(|&&n| n >= 3).count();
        prop_assert_eq!(ds.users.len(), kept);
        prop_assert_eq!(report.dropped_short_users, per_user.len() - kept);
        for s in &ds.users {
            let full = s.full_items();
            prop_assert_eq!(full.len(), s.train_items.len() + 2);
            prop_assert_eq!(&full[..s.train_items.len()], &s.train_items[..]);
            prop_assert_eq!(full[full.len() - 2], s.valid.0);
            prop_assert_eq!(full[full.len() - 1], s.test.0);
            for (&i, &c) in full.iter().zip(&s.full_cats()) {
                prop_assert_eq!(ds.catalog.item_category(i), Some(c));
            }
        }
    }

    #[test]
    fn window_targets_are_shifted_inputs(
        seq in prop::collection::vec(1usize..30, 0..25),
        window in 1usize..8,
    ) {
        let cats: Vec<usize> = seq.iter().map(|i| i % 3 + 1).collect();
        let windows = sliding_windows(0, &seq, &cats, window).unwrap();
        let expected = if seq.len() < 2 { 0 } else { 1.max(seq.len().saturating_sub(window)) };
        prop_assert_eq!(windows.len(), expected);
        for w in &windows {
            prop_assert_eq!(w.input_items.len(), window);
            for k in 0..window {
                if w.mask[k] {
                    prop_assert!(w.input_items[k] != 0 && w.target_items[k] != 0);
                    if k + 1 < window && w.mask[k + 1] {
                        prop_assert_eq!(w.target_items[k], w.input_items[k + 1]);
                        prop_assert_eq!(w.target_cats[k], w.input_cats[k + 1]);
                    }
                } else {
                    prop_assert_eq!(w.input_items[k], 0);
                    // padding only on the left
                    prop_assert!(w.mask[..k].iter().all(|m| !m));
                }
            }
        }
    }

    #[test]
    fn batches_partition_indices(n in 0usize..300, size in 1usize..64, seed in any::<u64>()) {
        let batches = make_batches(n, size, seed).unwrap();
        let mut all: Vec<usize> = batches.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert!(batches.iter().all(|b| b.len() <= size && !b.is_empty()));
    }

    #[test]
    fn metrics_monotone_and_bounded(rank in 0usize..600, a in 1usize..50, b in 1usize..50) {
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(hit_at_n(rank, lo) <= hit_at_n(rank, hi));
        prop_assert!(ndcg_at_n(rank, lo) <= ndcg_at_n(rank, hi));
        prop_assert!(ndcg_at_n(rank, hi) <= hit_at_n(rank, hi));
        prop_assert!((0.0..=1.0).contains(&ndcg_at_n(rank, hi)));
    }

    #[test]
    fn expected_ties_bracket_pessimistic(scores in prop::collection::vec(0u8..4, 2..30), n in 1usize..10) {
        let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
        let o = rank_outcome(&scores, 0).unwrap();
        let optimistic = hit_at_n(o.greater, n);
        let expected = o.hit(n, TieRule::Expected);
        let pessimistic = o.hit(n, TieRule::Pessimistic);
        prop_assert!(pessimistic <= expected + 1e-12 && expected <= optimistic + 1e-12);
        prop_assert!(o.ndcg(n, TieRule::Expected) <= expected + 1e-12);
    }
}
