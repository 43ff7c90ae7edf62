mod common;

use proptest::prelude::*;
use tamaraw_core::detector::container;
use tamaraw_core::detector::features::extract_kfp_features;
use tamaraw_core::detector::forest::{Forest, ForestConfig};
use tamaraw_core::detector::kfp::KfpModel;
use tamaraw_core::detector::safetime::{compute_safe_times, decide};
use tamaraw_core::error::Error;
use tamaraw_core::synth::{generate, SynthConfig};
use tamaraw_core::trace::Trace;

fn small_forest(seed: u64) -> ForestConfig {
    ForestConfig {
        n_trees: 25,
        seed,
        ..ForestConfig::default()
    }
}

fn corpus() -> Vec<Trace> {
    generate(&SynthConfig {
        n_sites: 5,
        traces_per_site: 16,
        min_patterns: 1,
        max_patterns: 1,
        ..SynthConfig::default()
    })
    .traces
}

#[test]
fn forest_training_is_seeded() {
    let traces = corpus();
    let x: Vec<Vec<f64>> = traces.iter().map(|t| extract_kfp_features(&t.packets)).collect();
    let y: Vec<u32> = traces.iter().map(|t| t.site_id).collect();
    let a = Forest::train(&x, &y, &small_forest(4)).unwrap();
    let b = Forest::train(&x, &y, &small_forest(4)).unwrap();
    assert_eq!(a, b);
    let hits = x.iter().zip(&y).filter(|(v, l)| a.predict(v) == **l).count();
    assert!(hits as f64 / x.len() as f64 > 0.9);
}

#[test]
fn kfp_identifies_held_out_sites() {
    let traces = corpus();
    let (train, test): (Vec<&Trace>, Vec<&Trace>) = traces.iter().partition(|t| t.instance_id % 4 != 0);
    let labels: Vec<u32> = train.iter().map(|t| t.site_id).collect();
    let model = KfpModel::train_traces(&train, &labels, 3, &small_forest(1)).unwrap();
    let again = KfpModel::train_traces(&train, &labels, 3, &small_forest(1)).unwrap();
    assert_eq!(model, again);
    let hits = test.iter().filter(|t| model.predict_trace(t) == t.site_id).count();
    assert!(hits as f64 / test.len() as f64 >= 0.8, "{hits} of {}", test.len());
}

#[test]
fn container_round_trip_and_tamper_detection() {
    let traces = corpus();
    let refs: Vec<&Trace> = traces.iter().collect();
    let labels: Vec<u32> = refs.iter().map(|t| t.site_id).collect();
    let model = KfpModel::train_traces(&refs, &labels, 3, &small_forest(2)).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    let digest = container::write(&path, &model, serde_json::json!({"purpose": "test"})).unwrap();
    let (back, header_digest): (KfpModel, String) = container::read_with_digest(&path).unwrap();
    assert_eq!(back, model);
    assert_eq!(header_digest, digest);
    let side: container::Sidecar =
        serde_json::from_str(&std::fs::read_to_string(container::sidecar_path(&path)).unwrap()).unwrap();
    assert_eq!(side.payload_sha256, digest);

    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 2;
    bytes[last] ^= 0x20;
    assert!(matches!(
        container::decode::<KfpModel>(&bytes),
        Err(Error::Container(_))
    ));
    bytes[0] = b'X';
    assert!(matches!(
        container::decode::<KfpModel>(&bytes),
        Err(Error::Container(_))
    ));
    assert!(matches!(
        container::read::<KfpModel>(&dir.path().join("absent.bin")),
        Err(Error::MissingArtifact(_))
    ));
}

/// Reference safe time: first checkpoint where the set's recall reaches
/// `alpha` times its recall on complete traces.
fn oracle_tau(truth: &[u32], routed: &[Vec<Option<u32>>], set: u32, checkpoints: &[f64], alpha: f64) -> Option<f64> {
    let mine: Vec<usize> = (0..truth.len()).filter(|&v| truth[v] == set).collect();
    if mine.is_empty() {
        return None;
    }
    let recall = |c: usize| mine.iter().filter(|&&v| routed[v][c] == Some(set)).count() as f64 / mine.len() as f64;
    let full = recall(checkpoints.len());
    if full == 0.0 {
        return None;
    }
    (0..checkpoints.len())
        .find(|&c| recall(c) >= alpha * full)
        .map(|c| checkpoints[c])
}

proptest! {
    #[test]
    fn safe_times_match_reference(
        seed in any::<u64>(),
        n_sets in 1usize..5,
        n_val in 0usize..30,
        n_cp in 1usize..8,
        alpha in 0.05f64..=1.0,
    ) {
        let mut r = common::rng(seed);
        let checkpoints: Vec<f64> = (1..=n_cp).map(|i| i as f64 * 0.5).collect();
        let truth: Vec<u32> = (0..n_val).map(|_| rand::Rng::random_range(&mut r, 0..n_sets as u32)).collect();
        let routed: Vec<Vec<Option<u32>>> = truth
            .iter()
            .map(|&t| {
                (0..=n_cp)
                    .map(|_| match rand::Rng::random_range(&mut r, 0..4) {
                        0 => None,
                        1 => Some(rand::Rng::random_range(&mut r, 0..n_sets as u32)),
                        _ => Some(t),
                    })
                    .collect()
            })
            .collect();
        let table = compute_safe_times(&truth, &routed, n_sets, &checkpoints, alpha).unwrap();
        for set in 0..n_sets as u32 {
            let want = oracle_tau(&truth, &routed, set, &checkpoints, alpha);
            prop_assert_eq!(table.tau(set), want);
            // Single shot: only the safe time itself accepts.
            for &t in &checkpoints {
                let accepted = decide(Some(set), t, &table);
                prop_assert_eq!(accepted.is_some(), want == Some(t));
            }
        }
    }
}
