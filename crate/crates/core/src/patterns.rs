//! Intra-site pattern mining with a modified CAST clusterer.
//!
//! Similarities use local scaling: `A(x, y) = exp(-d(x, y)^2 / (s_x * s_y))`
//! where `s_x` is the distance from `x` to its K-th nearest neighbour. The
//! affinity threshold is the mean pairwise similarity of the site. After the
//! CAST growth pass, a cleaning pass moves traces to clusters they are
//! strictly more affine to, and a merge pass folds the smallest cluster into
//! the neighbour that keeps the worst expansion ratio `cut / vol` lowest until
//! at most `max_clusters` remain.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{compute_tam, Tam, Trace, DEFAULT_N_SLOTS, DEFAULT_SLOT_WIDTH};

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    values: Vec<f64>,
    distances: Vec<f64>,
    pub local_scales: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[x * self.n + y]
    }

    #[inline]
    pub fn distance(&self, x: usize, y: usize) -> f64 {
        self.distances[x * self.n + y]
    }

    fn row(&self, x: usize) -> &[f64] {
        &self.values[x * self.n..(x + 1) * self.n]
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Builds the locally scaled similarity matrix over flattened TAMs.
pub fn similarity_matrix(tams: &[Tam], k_neighbors: usize) -> Result<SimilarityMatrix> {
    let n = tams.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "similarity needs at least 2 traces, got {n}"
        )));
    }
    if k_neighbors == 0 || k_neighbors >= n {
        return Err(Error::InvalidArgument(format!(
            "K = {k_neighbors} must satisfy 1 <= K < {n}"
        )));
    }
    let flat: Vec<Vec<f64>> = tams.iter().map(Tam::flatten).collect();
    let distances: Vec<f64> = (0..n)
        .into_par_iter()
        .flat_map_iter(|x| {
            let flat = &flat;
            (0..n).map(move |y| if x == y { 0.0 } else { euclidean(&flat[x], &flat[y]) })
        })
        .collect();

    let min_positive = distances
        .iter()
        .copied()
        .filter(|&d| d > 0.0)
        .fold(f64::INFINITY, f64::min);
    let fallback = if min_positive.is_finite() { min_positive } else { 1.0 };

    let local_scales: Vec<f64> = (0..n)
        .map(|x| {
            let mut row: Vec<f64> = (0..n).filter(|&y| y != x).map(|y| distances[x * n + y]).collect();
            row.sort_by(f64::total_cmp);
            let sigma = row[k_neighbors - 1];
            if sigma > 0.0 {
                sigma
            } else {
                fallback
            }
        })
        .collect();

    let mut values = vec![0.0; n * n];
    for x in 0..n {
        for y in 0..n {
            let d = distances[x * n + y];
            values[x * n + y] = if x == y {
                1.0
            } else {
                (-(d * d) / (local_scales[x] * local_scales[y])).exp()
            };
        }
    }
    Ok(SimilarityMatrix {
        n,
        values,
        distances,
        local_scales,
    })
}

/// Mean similarity over all unordered pairs `x < y`.
pub fn dynamic_threshold(sim: &SimilarityMatrix) -> f64 {
    let n = sim.len();
    if n < 2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for x in 0..n {
        for y in (x + 1)..n {
            sum += sim.get(x, y);
        }
    }
    sum / (n * (n - 1) / 2) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpansionMetric {
    /// cut and volume summed over similarities.
    Similarity,
    /// cut and volume summed over Euclidean distances.
    Distance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CastConfig {
    pub k_neighbors: usize,
    pub max_clusters: usize,
    pub max_cleaning_sweeps: usize,
    pub expansion: ExpansionMetric,
    pub slot_width: f64,
    pub n_slots: usize,
}

impl Default for CastConfig {
    fn default() -> Self {
        CastConfig {
            k_neighbors: 7,
            max_clusters: 6,
            max_cleaning_sweeps: 100,
            expansion: ExpansionMetric::Similarity,
            slot_width: DEFAULT_SLOT_WIDTH,
            n_slots: DEFAULT_N_SLOTS,
        }
    }
}

/// Partition of one site's traces; indices refer to the input slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternSet {
    pub site_id: u32,
    pub clusters: Vec<Vec<usize>>,
    pub threshold: f64,
    pub cleaning_converged: bool,
}

impl PatternSet {
    /// Cluster label of every trace.
    pub fn labels(&self, n: usize) -> Vec<usize> {
        let mut labels = vec![usize::MAX; n];
        for (c, members) in self.clusters.iter().enumerate() {
            for &m in members {
                labels[m] = c;
            }
        }
        labels
    }
}

fn mean_similarity(sim: &SimilarityMatrix, x: usize, members: &[usize]) -> f64 {
    if members.is_empty() {
        return 0.0;
    }
    members.iter().map(|&y| sim.get(x, y)).sum::<f64>() / members.len() as f64
}

/// Affinity of a member to its own cluster, itself excluded. Singletons have affinity 1.
pub fn own_affinity(sim: &SimilarityMatrix, x: usize, members: &[usize]) -> f64 {
    if members.len() <= 1 {
        return 1.0;
    }
    let sum: f64 = members.iter().filter(|&&y| y != x).map(|&y| sim.get(x, y)).sum();
    sum / (members.len() - 1) as f64
}

/// Affinity of a non-member to a cluster.
pub fn affinity(sim: &SimilarityMatrix, x: usize, members: &[usize]) -> f64 {
    mean_similarity(sim, x, members)
}

/// CAST growth: returns clusters in creation order, members in insertion order.
pub fn cast_clusters(sim: &SimilarityMatrix, threshold: f64) -> Vec<Vec<usize>> {
    let n = sim.len();
    let mut unassigned = vec![true; n];
    let mut remaining = n;
    let mut clusters = Vec::new();
    // Guards against add/evict cycles.
    let op_cap = 4 * n + 16;

    while remaining > 0 {
        let seed = unassigned.iter().position(|&u| u).expect("remaining > 0");
        unassigned[seed] = false;
        remaining -= 1;
        let mut members = vec![seed];
        let mut sums: Vec<f64> = sim.row(seed).to_vec();

        for _ in 0..op_cap {
            let size = members.len() as f64;
            let mut best: Option<(usize, f64)> = None;
            for (u, _) in unassigned.iter().enumerate().filter(|(_, &u)| u) {
                let a = sums[u] / size;
                if best.is_none_or(|(_, b)| a > b) {
                    best = Some((u, a));
                }
            }
            if let Some((u, a)) = best {
                if a >= threshold {
                    unassigned[u] = false;
                    remaining -= 1;
                    members.push(u);
                    for (s, v) in sums.iter_mut().zip(sim.row(u)) {
                        *s += v;
                    }
                    continue;
                }
            }
            if members.len() > 1 {
                let denom = size - 1.0;
                let mut worst: Option<(usize, f64)> = None;
                for (pos, &m) in members.iter().enumerate() {
                    let a = (sums[m] - 1.0) / denom;
                    if worst.is_none_or(|(_, w)| a < w) {
                        worst = Some((pos, a));
                    }
                }
                if let Some((pos, a)) = worst {
                    if a < threshold {
                        let m = members.remove(pos);
                        unassigned[m] = true;
                        remaining += 1;
                        for (s, v) in sums.iter_mut().zip(sim.row(m)) {
                            *s -= v;
                        }
                        continue;
                    }
                }
            }
            break;
        }
        clusters.push(members);
    }
    clusters
}

/// Moves traces to clusters with strictly higher affinity until nothing moves.
/// Returns the partition and whether it reached a fixed point within the cap.
// `label` is rewritten inside the sweep, so it is indexed rather than iterated.
#[allow(clippy::needless_range_loop)]
pub fn clean_clusters(
    sim: &SimilarityMatrix,
    mut clusters: Vec<Vec<usize>>,
    max_sweeps: usize,
) -> (Vec<Vec<usize>>, bool) {
    let n = sim.len();
    let mut label = vec![0usize; n];
    for (c, members) in clusters.iter().enumerate() {
        for &m in members {
            label[m] = c;
        }
    }
    let mut converged = false;
    for _ in 0..max_sweeps {
        let mut changed = false;
        for x in 0..n {
            let own = label[x];
            let own_aff = own_affinity(sim, x, &clusters[own]);
            let mut best: Option<(usize, f64)> = None;
            for (c, members) in clusters.iter().enumerate() {
                if c == own || members.is_empty() {
                    continue;
                }
                let a = affinity(sim, x, members);
                if best.is_none_or(|(_, b)| a > b) {
                    best = Some((c, a));
                }
            }
            if let Some((c, a)) = best {
                if a > own_aff {
                    clusters[own].retain(|&m| m != x);
                    clusters[c].push(x);
                    label[x] = c;
                    changed = true;
                }
            }
        }
        if !changed {
            converged = true;
            break;
        }
    }
    clusters.retain(|c| !c.is_empty());
    (clusters, converged)
}

/// Expansion ratio `cut(C) / vol(C)` of one cluster.
pub fn expansion_ratio(sim: &SimilarityMatrix, members: &[usize], in_cluster: &[bool], metric: ExpansionMetric) -> f64 {
    let weight = |x: usize, y: usize| match metric {
        ExpansionMetric::Similarity => sim.get(x, y),
        ExpansionMetric::Distance => sim.distance(x, y),
    };
    let mut cut = 0.0;
    let mut vol = 0.0;
    for &x in members {
        for (y, &inside) in in_cluster.iter().enumerate().take(sim.len()) {
            if inside {
                vol += weight(x, y);
            } else {
                cut += weight(x, y);
            }
        }
    }
    if vol > 0.0 {
        cut / vol
    } else if cut > 0.0 {
        f64::INFINITY
    } else {
        0.0
    }
}

fn max_expansion(sim: &SimilarityMatrix, clusters: &[Vec<usize>], metric: ExpansionMetric) -> f64 {
    let mut mask = vec![false; sim.len()];
    let mut worst = 0.0_f64;
    for members in clusters {
        for &m in members {
            mask[m] = true;
        }
        worst = worst.max(expansion_ratio(sim, members, &mask, metric));
        for &m in members {
            mask[m] = false;
        }
    }
    worst
}

/// Merges the smallest cluster into the partner minimizing the largest
/// resulting expansion ratio, until at most `max_clusters` remain.
pub fn merge_clusters(
    sim: &SimilarityMatrix,
    mut clusters: Vec<Vec<usize>>,
    max_clusters: usize,
    metric: ExpansionMetric,
) -> Vec<Vec<usize>> {
    let max_clusters = max_clusters.max(1);
    while clusters.len() > max_clusters {
        let smallest = (0..clusters.len())
            .min_by_key(|&c| (clusters[c].len(), c))
            .expect("non-empty");
        let mut best: Option<(usize, f64)> = None;
        for target in 0..clusters.len() {
            if target == smallest {
                continue;
            }
            let mut trial: Vec<Vec<usize>> = Vec::with_capacity(clusters.len() - 1);
            for (c, members) in clusters.iter().enumerate() {
                if c == smallest {
                    continue;
                }
                let mut m = members.clone();
                if c == target {
                    m.extend_from_slice(&clusters[smallest]);
                }
                trial.push(m);
            }
            let score = max_expansion(sim, &trial, metric);
            if best.is_none_or(|(_, b)| score < b) {
                best = Some((target, score));
            }
        }
        let (target, _) = best.expect("at least two clusters");
        let moved = std::mem::take(&mut clusters[smallest]);
        clusters[target].extend(moved);
        clusters.remove(smallest);
    }
    clusters
}

fn canonical(mut clusters: Vec<Vec<usize>>) -> Vec<Vec<usize>> {
    for c in &mut clusters {
        c.sort_unstable();
    }
    clusters.retain(|c| !c.is_empty());
    clusters.sort_by_key(|c| c[0]);
    clusters
}

/// Runs the full pattern-mining pipeline on one site's traces.
pub fn mine_patterns(site_traces: &[Trace], config: &CastConfig) -> Result<PatternSet> {
    if site_traces.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "pattern mining needs at least 2 traces, got {}",
            site_traces.len()
        )));
    }
    let tams = site_traces
        .iter()
        .map(|t| compute_tam(t, config.slot_width, config.n_slots))
        .collect::<Result<Vec<_>>>()?;
    // Small sites cannot have a K-th neighbour beyond n - 1.
    let k = config.k_neighbors.clamp(1, site_traces.len() - 1);
    let sim = similarity_matrix(&tams, k)?;
    Ok(mine_from_similarity(&sim, site_traces[0].site_id, config))
}

pub fn mine_from_similarity(sim: &SimilarityMatrix, site_id: u32, config: &CastConfig) -> PatternSet {
    let threshold = dynamic_threshold(sim);
    let initial = cast_clusters(sim, threshold);
    let (cleaned, converged) = clean_clusters(sim, initial, config.max_cleaning_sweeps);
    let merged = merge_clusters(sim, cleaned, config.max_clusters, config.expansion);
    PatternSet {
        site_id,
        clusters: canonical(merged),
        threshold,
        cleaning_converged: converged,
    }
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    if n < 2 {
        return 1.0;
    }
    let choose2 = |x: u64| (x * x.saturating_sub(1) / 2) as f64;
    let mut table: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut rows: BTreeMap<usize, u64> = BTreeMap::new();
    let mut cols: BTreeMap<usize, u64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&c| choose2(c)).sum();
    let sum_rows: f64 = rows.values().map(|&c| choose2(c)).sum();
    let sum_cols: f64 = cols.values().map(|&c| choose2(c)).sum();
    let total = choose2(n as u64);
    let expected = sum_rows * sum_cols / total;
    let max_index = 0.5 * (sum_rows + sum_cols);
    if (max_index - expected).abs() < 1e-12 {
        return 1.0;
    }
    (index - expected) / (max_index - expected)
}
