//! Property tests for the invariants of each module.

mod common;

use std::collections::{BTreeMap, HashSet};

use dcfo::bench::{diversity_det, mean_ranks, proximity_stats, RankDirection};
use dcfo::lof::{quantile, DuplicatePolicy};
use dcfo::{
    build_model, explain_many, explain_one, key_of, lof_region, lof_relocated, sample_gaussian,
    select_threshold, standardize, Dataset, ExplainConfig, ThresholdPolicy,
};
use proptest::prelude::*;

use common::brute_force_lof;

fn dataset(max_n: usize, max_dim: usize) -> impl Strategy<Value = (Vec<Vec<f64>>, usize)> {
    (1..=max_dim, 8..=max_n).prop_flat_map(|(dim, n)| {
        (
            prop::collection::vec(prop::collection::vec(-10.0..10.0f64, dim), n),
            1..=3usize,
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn lof_matches_oracle((rows, k) in dataset(60, 4)) {
        let m = build_model(Dataset::from_rows(&rows).unwrap(), k).unwrap();
        for (a, b) in m.lof_scores().iter().zip(brute_force_lof(&rows, k)) {
            prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
        }
    }

    #[test]
    fn scores_follow_a_permutation((rows, k) in dataset(40, 3), seed in any::<u64>()) {
        let n = rows.len();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut s = seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        let shuffled: Vec<Vec<f64>> = perm.iter().map(|&p| rows[p].clone()).collect();
        let a = build_model(Dataset::from_rows(&rows).unwrap(), k).unwrap();
        let b = build_model(Dataset::from_rows(&shuffled).unwrap(), k).unwrap();
        for (j, &p) in perm.iter().enumerate() {
            prop_assert!((b.lof_scores()[j] - a.lof_scores()[p]).abs() <= 1e-9);
        }
    }

    #[test]
    fn lof_is_mean_lrd_ratio((rows, k) in dataset(50, 3)) {
        let m = build_model(Dataset::from_rows(&rows).unwrap(), k).unwrap();
        for i in 0..m.len() {
            let mean: f64 = m.knn_list(i).iter().map(|&o| m.lrd_values()[o]).sum::<f64>() / k as f64;
            prop_assert!((m.lof_scores()[i] - mean / m.lrd_values()[i]).abs() <= 1e-9);
            prop_assert!(m.knn_list(i).len() == k && !m.knn_list(i).contains(&i));
        }
    }

    #[test]
    fn relocating_in_place_is_identity((rows, k) in dataset(30, 3), pick in any::<prop::sample::Index>()) {
        let data = Dataset::from_rows(&rows).unwrap();
        let m = build_model(data.clone(), k).unwrap();
        let i = pick.index(rows.len());
        let v = lof_relocated(&data, k, i, &rows[i]).unwrap();
        prop_assert!((v - m.lof_scores()[i]).abs() <= 1e-12);
    }

    #[test]
    fn region_value_equals_query_lof(
        (rows, k) in dataset(60, 3),
        pick in any::<prop::sample::Index>(),
        shift in prop::collection::vec(-3.0..3.0f64, 3),
    ) {
        let m = build_model(Dataset::from_rows(&rows).unwrap(), k).unwrap();
        let i = pick.index(rows.len());
        let x: Vec<f64> = rows[i].iter().zip(&shift).map(|(a, b)| a + b).collect();
        for excluded in [None, Some(i)] {
            let key = key_of(&m, &x, excluded).unwrap();
            prop_assert_eq!(key.k(), k);
            prop_assert!(excluded.is_none_or(|e| key.indices().all(|j| j != e)));
            let a = lof_region(&m, &key, &x).unwrap();
            let b = m.lof_query(&x, excluded).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn thresholds_are_order_statistics(scores in prop::collection::vec(0.5..5.0f64, 1..80), q in 0.0..=1.0f64) {
        let v = quantile(&scores, q);
        let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lo <= v && v <= hi);
        let t = select_threshold(&scores, ThresholdPolicy::Auto).unwrap().value;
        prop_assert!(t == 1.5 || (t - quantile(&scores, 0.95)).abs() < 1e-15);
    }

    #[test]
    fn standardize_is_invertible(rows in prop::collection::vec(prop::collection::vec(-50.0..50.0f64, 3), 3..40)) {
        let d = Dataset::from_rows(&rows).unwrap();
        let (z, params) = standardize(&d).unwrap();
        for (orig, scaled) in d.points().zip(z.points()) {
            for (a, b) in orig.iter().zip(params.invert(scaled)) {
                prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn diversity_in_unit_interval(points in prop::collection::vec(prop::collection::vec(-5.0..5.0f64, 2), 2..6)) {
        let distinct: HashSet<Vec<u64>> = points.iter().map(|p| p.iter().map(|v| v.to_bits()).collect()).collect();
        prop_assume!(distinct.len() == points.len());
        let d = diversity_det(&points).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&d));
    }

    #[test]
    fn proximity_mean_bounds(distances in prop::collection::vec(0.0..10.0f64, 1..30)) {
        let (mean, sem) = proximity_stats(&distances).unwrap();
        prop_assert!(mean >= 0.0);
        prop_assert_eq!(sem.is_none(), distances.len() == 1);
        prop_assert!(sem.is_none_or(|s| s >= 0.0));
    }

    #[test]
    fn ranks_stay_in_range(table in prop::collection::vec(prop::collection::vec(prop::option::of(0.0..1.0f64), 3), 1..6)) {
        let map: BTreeMap<String, BTreeMap<String, Option<f64>>> = table
            .iter()
            .enumerate()
            .map(|(d, row)| (format!("d{d}"), row.iter().enumerate().map(|(m, v)| (format!("m{m}"), *v)).collect()))
            .collect();
        let ranks = mean_ranks(&map, RankDirection::LowerBetter).unwrap();
        prop_assert!(ranks.values().all(|&r| (1.0..=3.0).contains(&r)));
        // ranks within each dataset sum to M(M+1)/2
        prop_assert!((ranks.values().sum::<f64>() - 6.0).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn explanations_are_valid_and_respect_masks(seed in 0..500u64, dim in 2..4usize, freeze in 0..4usize) {
        let data = sample_gaussian(120, dim, seed).unwrap();
        let m = build_model(data, 6).unwrap();
        let mut mask = vec![true; dim];
        if freeze < dim {
            mask[freeze] = false;
        }
        let cfg = ExplainConfig {
            actionable_mask: Some(mask.clone()),
            queue_limit: 16,
            ..ExplainConfig::with_k(6)
        };
        let (t, outliers) = dcfo::detect_outliers(&m, cfg.threshold).unwrap();
        for &i in outliers.iter().take(4) {
            let origin = m.data().point(i).to_vec();
            let many = explain_many(&m, i, 3, &cfg).unwrap();
            let single = explain_one(&m, i, &cfg).unwrap();
            prop_assert_eq!(&many[0].location, &single.location);
            let keys: HashSet<_> = many.iter().map(|r| &r.key).collect();
            prop_assert_eq!(keys.len(), many.len());
            for r in many.iter().chain([&single]) {
                prop_assert!(r.regions_visited <= cfg.queue_limit);
                for (c, &active) in mask.iter().enumerate() {
                    if !active {
                        prop_assert_eq!(r.location[c].to_bits(), origin[c].to_bits());
                    }
                }
                if r.is_found() {
                    prop_assert!(m.lof_query(&r.location, Some(i)).unwrap() <= t.value + 1e-6);
                    prop_assert_eq!(&key_of(&m, &r.location, Some(i)).unwrap(), &r.key);
                }
            }
        }
    }
}

#[test]
fn duplicate_policies() {
    let rows = vec![vec![0.0], vec![0.0], vec![0.0], vec![5.0]];
    let d = Dataset::from_rows(&rows).unwrap();
    assert!(dcfo::LofModel::build(d.clone(), 2, DuplicatePolicy::Reject).is_err());
    let m = dcfo::LofModel::build(d, 2, DuplicatePolicy::Epsilon).unwrap();
    assert!(m.lof_scores().iter().all(|s| s.is_finite()));
}
