mod common;

use proptest::prelude::*;
use tamaraw_core::anonymity::attacker_accuracy;
use tamaraw_core::bound::{global_bound, global_bound_traces, set_weights, weighted_delta, Weighting};
use tamaraw_core::tamaraw::{defend, defended_lengths, TamarawParams};
use tamaraw_core::trace::Trace;

fn arb_sets() -> impl Strategy<Value = Vec<Vec<(u32, u8)>>> {
    prop::collection::vec(prop::collection::vec((0u32..5, 0u8..4), 1..30), 1..5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn accuracy_matches_majority_oracle(labeled in prop::collection::vec((0u32..6, 0u8..5), 1..80)) {
        prop_assert!((attacker_accuracy(&labeled) - common::oracle_majority(&labeled)).abs() < 1e-12);
    }

    #[test]
    fn set_and_output_side_agree(sets in arb_sets(), uniform in any::<bool>()) {
        let sizes: Vec<usize> = sets.iter().map(Vec::len).collect();
        let w = set_weights(&sizes, if uniform { Weighting::Uniform } else { Weighting::Proportional });
        let g = global_bound(&sets, &w).unwrap();
        let oracle = common::oracle_inverse_delta_sum(&sets, &w);
        prop_assert!((g.value - oracle).abs() < 1e-9);
        prop_assert!((g.value - g.output_side).abs() < 1e-9);
        let direct: f64 = sets.iter().zip(&w).map(|(s, w)| w * common::oracle_majority(s)).sum();
        prop_assert!((g.value - direct).abs() < 1e-9);
    }

    #[test]
    fn weighted_delta_is_size_over_majority(sites in prop::collection::vec(0u32..4, 1..40)) {
        let d = weighted_delta(&sites).unwrap();
        let max = (0..4).map(|s| sites.iter().filter(|&&x| x == s).count()).max().unwrap();
        prop_assert_eq!(d, sites.len() as f64 / max as f64);
        prop_assert!(d >= 1.0);
    }
}

#[test]
fn equal_lengths_mean_equal_observations() {
    let mut rng = common::rng(11);
    let p = TamarawParams::new(0.05, 0.02, 50).unwrap();
    let traces: Vec<Trace> = (0..200)
        .map(|i| common::random_trace(&mut rng, 60, 3.0, i % 4, i))
        .collect();
    let mut seen: std::collections::HashMap<(u32, u32), Vec<(u64, tamaraw_core::trace::Direction)>> =
        Default::default();
    let mut labeled_obs = Vec::new();
    let mut labeled_len = Vec::new();
    for t in &traces {
        let d = defend(t, &p).unwrap();
        let obs = d.observable();
        let key = defended_lengths(t, &p);
        if let Some(prev) = seen.get(&key) {
            assert_eq!(prev, &obs);
        }
        seen.insert(key, obs.clone());
        labeled_obs.push((t.site_id, obs));
        labeled_len.push((t.site_id, key));
    }
    assert!(seen.len() < traces.len(), "fixture should produce collisions");
    let refs: Vec<&Trace> = traces.iter().collect();
    let g = global_bound_traces(&[refs], &p, Weighting::Proportional).unwrap();
    assert!((g.value - common::oracle_majority(&labeled_obs)).abs() < 1e-9);
    assert!((g.value - common::oracle_majority(&labeled_len)).abs() < 1e-9);
}

#[test]
fn bad_weights_are_rejected() {
    let sets = vec![vec![(0u32, 1u8)], vec![(1, 1)]];
    assert!(global_bound(&sets, &[0.7, 0.7]).is_err());
    assert!(global_bound(&sets, &[1.0]).is_err());
    assert!(global_bound(&sets, &[1.5, -0.5]).is_err());
}
