mod common;

use tamaraw_core::patterns::{
    adjusted_rand_index, cast_clusters, clean_clusters, dynamic_threshold, mine_patterns, similarity_matrix,
    CastConfig, SimilarityMatrix,
};
use tamaraw_core::trace::{compute_tam, Tam};

fn tams(traces: &[tamaraw_core::trace::Trace]) -> Vec<Tam> {
    traces.iter().map(|t| compute_tam(t, 0.08, 1000).unwrap()).collect()
}

fn oracle_affinity(sim: &SimilarityMatrix, x: usize, members: &[usize]) -> f64 {
    let others: Vec<usize> = members.iter().copied().filter(|&y| y != x).collect();
    if others.is_empty() {
        return 1.0;
    }
    others.iter().map(|&y| sim.get(x, y)).sum::<f64>() / others.len() as f64
}

#[test]
fn tam_matches_direct_binning() {
    let (traces, _) = common::planted_site(3, 0, 2, 4);
    for t in &traces {
        assert_eq!(
            compute_tam(t, 0.08, 1000).unwrap().flatten(),
            common::oracle_tam(t, 0.08, 1000)
        );
    }
}

#[test]
fn similarity_is_symmetric_with_unit_diagonal() {
    let (traces, _) = common::planted_site(5, 1, 3, 6);
    let sim = similarity_matrix(&tams(&traces), 7).unwrap();
    for x in 0..sim.len() {
        assert_eq!(sim.get(x, x), 1.0);
        for y in 0..sim.len() {
            assert!((sim.get(x, y) - sim.get(y, x)).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&sim.get(x, y)));
        }
    }
}

#[test]
fn recovers_well_separated_planted_patterns() {
    let mut checked = 0;
    for seed in 0..12u64 {
        for n_patterns in 2..=3 {
            let (traces, labels) = common::planted_site(seed, seed as u32, n_patterns, 12);
            let flat: Vec<Vec<f64>> = traces.iter().map(|t| common::oracle_tam(t, 0.08, 1000)).collect();
            if common::separation_ratio(&flat, &labels) < 3.0 {
                continue;
            }
            checked += 1;
            let found = mine_patterns(&traces, &CastConfig::default()).unwrap();
            assert!(found.clusters.len() <= 6);
            let got = found.labels(traces.len());
            let ari = common::oracle_ari(&labels, &got);
            assert!((ari - adjusted_rand_index(&labels, &got)).abs() < 1e-9);
            assert!(ari >= 0.9, "seed {seed}, {n_patterns} patterns: ARI {ari}");
        }
    }
    assert!(checked >= 10, "only {checked} fixtures were well separated");
}

#[test]
fn cleaning_reaches_an_affinity_fixed_point() {
    for seed in 0..8u64 {
        let (traces, _) = common::planted_site(seed + 100, 0, 3, 10);
        let sim = similarity_matrix(&tams(&traces), 7).unwrap();
        let initial = cast_clusters(&sim, dynamic_threshold(&sim));
        let (clusters, converged) = clean_clusters(&sim, initial, 100);
        assert!(converged);
        let mut seen = vec![false; sim.len()];
        for (c, members) in clusters.iter().enumerate() {
            for &x in members {
                assert!(!seen[x]);
                seen[x] = true;
                let own = oracle_affinity(&sim, x, members);
                for (d, other) in clusters.iter().enumerate() {
                    if d != c {
                        let a = other.iter().map(|&y| sim.get(x, y)).sum::<f64>() / other.len() as f64;
                        assert!(a <= own, "seed {seed}: trace {x} prefers cluster {d}");
                    }
                }
            }
        }
        assert!(seen.iter().all(|&s| s));
    }
}

#[test]
fn merging_caps_the_cluster_count() {
    let (traces, _) = common::planted_site(42, 7, 3, 10);
    let config = CastConfig {
        max_clusters: 2,
        ..CastConfig::default()
    };
    let found = mine_patterns(&traces, &config).unwrap();
    assert!(found.clusters.len() <= 2);
    assert_eq!(found.clusters.iter().map(Vec::len).sum::<usize>(), traces.len());
}

#[test]
fn too_few_traces() {
    let (traces, _) = common::planted_site(1, 0, 1, 1);
    assert!(mine_patterns(&traces, &CastConfig::default()).is_err());
}
