//! Pattern-level anonymity sets.
//!
//! The distance between a partial set `C` and a candidate pattern `p` is the
//! optimal attacker's accuracy on `C ∪ p` averaged over a parameter grid.
//! Under one parameter pair the attacker sees only the per-direction
//! defended lengths `(n_out, n_in)`, so the best it can do is guess the
//! majority site of every length bucket.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::hash::Hash;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tamaraw::{defended_lengths, mean_overhead, TamarawParams};
use crate::trace::Trace;

/// Packs a `(n_out, n_in)` length pair into one bucket key.
#[inline]
pub fn length_key(n_out: u32, n_in: u32) -> u64 {
    ((n_out as u64) << 32) | n_in as u64
}

/// Accuracy of the per-bucket majority guess over `(site, bucket)` pairs.
pub fn attacker_accuracy<K: Hash + Eq>(labeled: &[(u32, K)]) -> f64 {
    if labeled.is_empty() {
        return 0.0;
    }
    let mut buckets: HashMap<&K, HashMap<u32, u32>> = HashMap::new();
    for (site, key) in labeled {
        *buckets.entry(key).or_default().entry(*site).or_default() += 1;
    }
    let majority: u64 = buckets
        .values()
        .map(|sites| *sites.values().max().unwrap_or(&0) as u64)
        .sum();
    majority as f64 / labeled.len() as f64
}

/// Attacker accuracy on traces defended with one parameter pair.
pub fn attacker_accuracy_traces<'a>(traces: impl IntoIterator<Item = &'a Trace>, params: &TamarawParams) -> f64 {
    let labeled: Vec<(u32, u64)> = traces
        .into_iter()
        .map(|t| {
            let (o, i) = defended_lengths(t, params);
            (t.site_id, length_key(o, i))
        })
        .collect();
    attacker_accuracy(&labeled)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pattern {
    pub pattern_id: u32,
    pub site_id: u32,
    /// Cluster index within the site.
    pub local_index: u32,
    /// Indices into the training trace store.
    pub members: Vec<usize>,
}

/// Defended length buckets of every pattern under every grid parameter,
/// grouped as `(key, count)`.
#[derive(Debug, Clone)]
pub struct LengthCache {
    pub grid: Vec<TamarawParams>,
    shapes: Vec<Vec<Vec<(u64, u32)>>>,
    sizes: Vec<u32>,
    sites: Vec<u32>,
}

impl LengthCache {
    /// `patterns[i]` must have `pattern_id == i`.
    pub fn build(patterns: &[Pattern], traces: &[Trace], grid: &[TamarawParams]) -> LengthCache {
        let shapes = patterns
            .par_iter()
            .map(|p| {
                grid.iter()
                    .map(|params| {
                        let mut counts: BTreeMap<u64, u32> = BTreeMap::new();
                        for &m in &p.members {
                            let (o, i) = defended_lengths(&traces[m], params);
                            *counts.entry(length_key(o, i)).or_default() += 1;
                        }
                        counts.into_iter().collect()
                    })
                    .collect()
            })
            .collect();
        LengthCache {
            grid: grid.to_vec(),
            shapes,
            sizes: patterns.iter().map(|p| p.members.len() as u32).collect(),
            sites: patterns.iter().map(|p| p.site_id).collect(),
        }
    }

    pub fn n_patterns(&self) -> usize {
        self.sizes.len()
    }
}

#[derive(Debug, Clone, Default)]
struct Bucket {
    counts: Vec<(u32, u32)>,
    max: u32,
}

impl Bucket {
    fn count(&self, site: u32) -> u32 {
        self.counts.iter().find(|(s, _)| *s == site).map_or(0, |(_, c)| *c)
    }

    fn add(&mut self, site: u32, n: u32) {
        match self.counts.iter_mut().find(|(s, _)| *s == site) {
            Some((_, c)) => *c += n,
            None => self.counts.push((site, n)),
        }
        self.max = self.max.max(self.count(site));
    }
}

/// Incremental bucket state of a set under every grid parameter.
#[derive(Debug, Clone)]
pub struct SetState {
    buckets: Vec<HashMap<u64, Bucket>>,
    majority: Vec<u64>,
    total: u64,
    pub patterns: Vec<usize>,
}

impl SetState {
    pub fn new(grid_len: usize) -> SetState {
        SetState {
            buckets: vec![HashMap::new(); grid_len],
            majority: vec![0; grid_len],
            total: 0,
            patterns: Vec::new(),
        }
    }

    pub fn from_patterns(cache: &LengthCache, patterns: &[usize]) -> SetState {
        let mut s = SetState::new(cache.grid.len());
        for &p in patterns {
            s.add(cache, p);
        }
        s
    }

    /// Attacker accuracy of the current set under grid parameter `g`.
    pub fn accuracy(&self, g: usize) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.majority[g] as f64 / self.total as f64
        }
    }

    /// `d(C, p)`: mean over the grid of the attacker accuracy on `C ∪ p`.
    pub fn distance(&self, cache: &LengthCache, p: usize) -> f64 {
        let site = cache.sites[p];
        let total = (self.total + cache.sizes[p] as u64) as f64;
        let mut acc = 0.0;
        for (g, shape) in cache.shapes[p].iter().enumerate() {
            let mut majority = self.majority[g];
            for &(key, n) in shape {
                match self.buckets[g].get(&key) {
                    Some(b) => {
                        let merged = b.count(site) + n;
                        if merged > b.max {
                            majority += (merged - b.max) as u64;
                        }
                    }
                    None => majority += n as u64,
                }
            }
            acc += majority as f64 / total;
        }
        acc / cache.grid.len() as f64
    }

    pub fn add(&mut self, cache: &LengthCache, p: usize) {
        let site = cache.sites[p];
        for (g, shape) in cache.shapes[p].iter().enumerate() {
            for &(key, n) in shape {
                let b = self.buckets[g].entry(key).or_default();
                let before = b.max;
                b.add(site, n);
                self.majority[g] += (b.max - before) as u64;
            }
        }
        self.total += cache.sizes[p] as u64;
        self.patterns.push(p);
    }
}

/// `d(C, p)` for an explicit set of pattern indices.
pub fn distance(cache: &LengthCache, set: &[usize], candidate: usize) -> f64 {
    SetState::from_patterns(cache, set).distance(cache, candidate)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnonymitySet {
    pub set_id: u32,
    pub pattern_ids: Vec<u32>,
    pub local_params: Option<TamarawParams>,
    pub safe_time: Option<f64>,
}

fn argmin_by(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v < values[best] {
            best = i;
        }
    }
    best
}

fn argmax_by(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Instances with at most this many patterns are partitioned exactly.
pub const EXACT_LIMIT: usize = 8;

fn check_sizes(n: usize, k: usize) -> Result<()> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("k = {k} must be at least 2")));
    }
    if n < k {
        return Err(Error::InsufficientData(format!(
            "{n} patterns cannot fill a set of size {k}"
        )));
    }
    Ok(())
}

fn into_sets(blocks: Vec<Vec<usize>>) -> Vec<AnonymitySet> {
    blocks
        .into_iter()
        .enumerate()
        .map(|(i, b)| AnonymitySet {
            set_id: i as u32,
            pattern_ids: b.into_iter().map(|p| p as u32).collect(),
            local_params: None,
            safe_time: None,
        })
        .collect()
}

/// Mean over sets of the grid-averaged attacker accuracy.
pub fn mean_set_accuracy(cache: &LengthCache, blocks: &[Vec<usize>]) -> f64 {
    let g = cache.grid.len() as f64;
    let per_set = blocks.iter().map(|b| {
        let s = SetState::from_patterns(cache, b);
        (0..cache.grid.len()).map(|i| s.accuracy(i)).sum::<f64>() / g
    });
    per_set.sum::<f64>() / blocks.len() as f64
}

/// k-anonymous grouping of patterns into `floor(n / k)` sets.
///
/// Small instances are solved exactly, larger ones with [`greedy_sets`].
pub fn build_sets(cache: &LengthCache, k: usize) -> Result<Vec<AnonymitySet>> {
    let n = cache.n_patterns();
    check_sizes(n, k)?;
    if n <= EXACT_LIMIT {
        return Ok(into_sets(exact_partition(cache, k)));
    }
    greedy_sets(cache, k)
}

/// Greedy k-anonymous grouping of patterns.
///
/// Seeds the first set with the lowest pattern id, grows each set with the
/// closest pattern until it holds `k`, seeds the next set with the pattern
/// farthest from all existing sets, and finally assigns leftovers to their
/// closest set. Ties go to the lowest pattern id or set index.
pub fn greedy_sets(cache: &LengthCache, k: usize) -> Result<Vec<AnonymitySet>> {
    check_sizes(cache.n_patterns(), k)?;
    let blocks = greedy(cache, k).into_iter().map(|s| s.patterns).collect();
    Ok(into_sets(blocks))
}

/// The partition into exactly `floor(n / k)` blocks of at least `k` patterns
/// with the lowest [`mean_set_accuracy`]; the first one found wins ties.
fn exact_partition(cache: &LengthCache, k: usize) -> Vec<Vec<usize>> {
    fn visit(
        p: usize,
        blocks: &mut Vec<Vec<usize>>,
        cache: &LengthCache,
        k: usize,
        want: usize,
        best: &mut Option<(f64, Vec<Vec<usize>>)>,
    ) {
        let n = cache.n_patterns();
        if p == n {
            if blocks.len() == want && blocks.iter().all(|b| b.len() >= k) {
                let v = mean_set_accuracy(cache, blocks);
                if best.as_ref().is_none_or(|(b, _)| v < *b) {
                    *best = Some((v, blocks.clone()));
                }
            }
            return;
        }
        // Blocks still short of k need at least that many of the remaining patterns.
        let missing: usize = blocks.iter().map(|b| k.saturating_sub(b.len())).sum();
        let unopened = want.saturating_sub(blocks.len()) * k;
        if missing + unopened > n - p {
            return;
        }
        for i in 0..blocks.len() {
            blocks[i].push(p);
            visit(p + 1, blocks, cache, k, want, best);
            blocks[i].pop();
        }
        if blocks.len() < want {
            blocks.push(vec![p]);
            visit(p + 1, blocks, cache, k, want, best);
            blocks.pop();
        }
    }
    let want = cache.n_patterns() / k;
    let mut best = None;
    visit(0, &mut Vec::new(), cache, k, want, &mut best);
    best.map(|(_, b)| b).expect("n >= k admits a partition")
}

fn greedy(cache: &LengthCache, k: usize) -> Vec<SetState> {
    let n = cache.n_patterns();
    let grid_len = cache.grid.len();
    let mut unassigned: Vec<usize> = (1..n).collect();
    let mut sets = vec![SetState::new(grid_len)];
    sets[0].add(cache, 0);
    let mut frozen_sum = vec![0.0; n];
    let n_full = n / k;

    for i in 0..n_full {
        while sets[i].patterns.len() < k && !unassigned.is_empty() {
            let current = &sets[i];
            let d: Vec<f64> = unassigned.par_iter().map(|&p| current.distance(cache, p)).collect();
            let pick = unassigned.remove(argmin_by(&d));
            sets[i].add(cache, pick);
        }
        let done = &sets[i];
        let d: Vec<f64> = unassigned.par_iter().map(|&p| done.distance(cache, p)).collect();
        for (&p, v) in unassigned.iter().zip(d) {
            frozen_sum[p] += v;
        }
        // The last full set gets no successor; leftovers are assigned below.
        if !unassigned.is_empty() && i + 1 < n_full {
            let scores: Vec<f64> = unassigned.iter().map(|&p| frozen_sum[p]).collect();
            let seed = unassigned.remove(argmax_by(&scores));
            let mut s = SetState::new(grid_len);
            s.add(cache, seed);
            sets.push(s);
        }
    }

    for p in std::mem::take(&mut unassigned) {
        let d: Vec<f64> = sets.par_iter().map(|s| s.distance(cache, p)).collect();
        let j = argmin_by(&d);
        sets[j].add(cache, p);
    }
    sets
}

/// Picks the grid pair whose mean bandwidth and time overheads on the set's
/// traces are both strictly below those of `global`, minimizing their sum.
pub fn select_local_params(
    set_traces: &[Trace],
    global: &TamarawParams,
    grid: &[TamarawParams],
) -> Option<TamarawParams> {
    if set_traces.is_empty() {
        return None;
    }
    let base = mean_overhead(set_traces, global);
    let points: Vec<_> = grid
        .par_iter()
        .map(|g| mean_overhead(set_traces, &g.with_bucket(global.bucket)))
        .collect();
    let mut best: Option<(f64, TamarawParams)> = None;
    for p in points {
        if p.bandwidth < base.bandwidth && p.time < base.time {
            let total = p.total();
            if best.is_none_or(|(b, _)| total < b) {
                best = Some((total, p.params));
            }
        }
    }
    best.map(|(_, p)| p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PurityReport {
    /// Percentage of each set's traces that come from its most common site.
    pub per_set: Vec<f64>,
    pub mean: f64,
    /// The perfectly balanced reference `100 / k`.
    pub reference: f64,
    /// Number of distinct sites per set.
    pub distinct_sites: Vec<usize>,
}

/// Trace-level purity of each set, given the site label of every trace in it.
pub fn purity(set_sites: &[Vec<u32>], k: usize) -> Result<PurityReport> {
    if set_sites.is_empty() {
        return Err(Error::InvalidArgument("purity of no sets".into()));
    }
    let mut per_set = Vec::with_capacity(set_sites.len());
    let mut distinct_sites = Vec::with_capacity(set_sites.len());
    for sites in set_sites {
        let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
        for &s in sites {
            *counts.entry(s).or_default() += 1;
        }
        let max = counts.values().copied().max().unwrap_or(0);
        per_set.push(if sites.is_empty() {
            0.0
        } else {
            100.0 * max as f64 / sites.len() as f64
        });
        distinct_sites.push(counts.len());
    }
    let mean = per_set.iter().sum::<f64>() / per_set.len() as f64;
    Ok(PurityReport {
        per_set,
        mean,
        reference: 100.0 / k.max(1) as f64,
        distinct_sites,
    })
}

/// Element-wise maximum of flattened TAMs.
pub fn super_matrix(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut out: Vec<f64> = vec![0.0; rows.first().map_or(0, Vec::len)];
    for r in rows {
        for (o, v) in out.iter_mut().zip(r) {
            *o = (*o).max(*v);
        }
    }
    out
}

/// Diagnostic baseline: greedy k-anonymous grouping of super-matrices by
/// Euclidean distance to the growing set's own super-matrix.
pub fn super_matrix_sets(elements: &[Vec<f64>], k: usize) -> Vec<Vec<usize>> {
    let n = elements.len();
    if n == 0 || k == 0 {
        return Vec::new();
    }
    let dist = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt() };
    let mut unassigned: BTreeSet<usize> = (0..n).collect();
    let mut groups: Vec<(Vec<usize>, Vec<f64>)> = Vec::new();
    while unassigned.len() >= k {
        let seed = *unassigned.iter().next().expect("non-empty");
        unassigned.remove(&seed);
        let mut members = vec![seed];
        let mut sm = elements[seed].clone();
        while members.len() < k {
            let next = *unassigned
                .iter()
                .min_by(|&&a, &&b| dist(&sm, &elements[a]).total_cmp(&dist(&sm, &elements[b])))
                .expect("enough left");
            unassigned.remove(&next);
            for (o, v) in sm.iter_mut().zip(&elements[next]) {
                *o = (*o).max(*v);
            }
            members.push(next);
        }
        groups.push((members, sm));
    }
    for p in unassigned {
        if groups.is_empty() {
            groups.push((vec![p], elements[p].clone()));
            continue;
        }
        let j = (0..groups.len())
            .min_by(|&a, &b| dist(&groups[a].1, &elements[p]).total_cmp(&dist(&groups[b].1, &elements[p])))
            .expect("non-empty");
        groups[j].0.push(p);
        let sm = super_matrix(&[groups[j].1.clone(), elements[p].clone()]);
        groups[j].1 = sm;
    }
    groups.into_iter().map(|(m, _)| m).collect()
}

/// Bandwidth overhead proxy: each trace is padded up to its group's super-matrix.
pub fn super_matrix_overhead(groups: &[Vec<usize>], element_tams: &[Vec<Vec<f64>>]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for g in groups {
        let rows: Vec<Vec<f64>> = g.iter().flat_map(|&e| element_tams[e].iter().cloned()).collect();
        let sm_total: f64 = super_matrix(&rows).iter().sum();
        for r in &rows {
            let real: f64 = r.iter().sum();
            if real > 0.0 {
                sum += (sm_total - real) / real;
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{Direction, Packet};

    fn burst_trace(site: u32, n_in: usize) -> Trace {
        let mut pk = vec![Packet::new(0.0, Direction::Out)];
        pk.extend((0..n_in).map(|_| Packet::new(0.0, Direction::In)));
        Trace::new(pk, site, 0)
    }

    #[test]
    fn accuracy_single_site_and_balanced() {
        assert_eq!(attacker_accuracy(&[(1, 0u64), (1, 5), (1, 5)]), 1.0);
        assert_eq!(attacker_accuracy(&[(1, 0u64), (1, 0), (2, 0), (2, 0)]), 0.5);
    }

    #[test]
    fn distance_of_empty_set_is_pattern_accuracy() {
        let traces = vec![burst_trace(0, 5), burst_trace(0, 500)];
        let patterns = vec![Pattern {
            pattern_id: 0,
            site_id: 0,
            local_index: 0,
            members: vec![0, 1],
        }];
        let grid = vec![TamarawParams::new(0.1, 0.01, 10).unwrap()];
        let cache = LengthCache::build(&patterns, &traces, &grid);
        assert_eq!(distance(&cache, &[], 0), 1.0);
    }

    #[test]
    fn local_params_none_when_global_is_best() {
        let traces = vec![burst_trace(0, 50)];
        let global = TamarawParams::new(0.1, 0.01, 10).unwrap();
        assert_eq!(select_local_params(&traces, &global, &[global]), None);
    }

    #[test]
    fn purity_extremes() {
        let r = purity(&[vec![3, 3, 3]], 2).unwrap();
        assert_eq!(r.per_set, vec![100.0]);
        let r = purity(&[vec![1, 2, 3, 4]], 4).unwrap();
        assert_eq!(r.mean, 25.0);
        assert_eq!(r.reference, 25.0);
        assert_eq!(r.distinct_sites, vec![4]);
        assert!(purity(&[], 2).is_err());
    }

    #[test]
    fn super_matrix_grouping() {
        let e = vec![vec![1.0, 0.0], vec![0.0, 9.0], vec![1.0, 0.1], vec![0.0, 8.0]];
        let groups = super_matrix_sets(&e, 2);
        assert_eq!(groups, vec![vec![0, 2], vec![1, 3]]);
        let tams: Vec<Vec<Vec<f64>>> = e.iter().map(|r| vec![r.clone()]).collect();
        let o = super_matrix_overhead(&groups, &tams);
        assert!(o > 0.0);
    }
}
