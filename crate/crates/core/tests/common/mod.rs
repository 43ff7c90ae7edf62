//! Independent reference implementations used by the integration and
//! acceptance tests. Nothing here calls the library code it checks.

#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tamaraw_core::tamaraw::TamarawParams;
use tamaraw_core::trace::{Direction, Packet, Trace};

pub const EPS: f64 = 1e-9;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A random trace with `1..=max_packets` packets over roughly `span` seconds.
pub fn random_trace(rng: &mut impl Rng, max_packets: usize, span: f64, site: u32, instance: u32) -> Trace {
    let n = rng.random_range(1..=max_packets);
    let mut times: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..span)).collect();
    times.sort_by(f64::total_cmp);
    // Bursts of equal timestamps are common in real captures.
    for i in 1..n {
        if rng.random_bool(0.1) {
            times[i] = times[i - 1];
        }
    }
    let packets = times
        .into_iter()
        .map(|t| {
            let d = if rng.random_bool(0.3) {
                Direction::Out
            } else {
                Direction::In
            };
            Packet::new(t, d)
        })
        .collect();
    Trace::new(packets, site, instance)
}

pub fn random_params(rng: &mut impl Rng) -> TamarawParams {
    let buckets = [1u32, 2, 5, 10, 50, 100];
    TamarawParams::new(
        rng.random_range(0.001..0.2),
        rng.random_range(0.0005..0.1),
        buckets[rng.random_range(0..buckets.len())],
    )
    .unwrap()
}

/// Cell-by-cell simulation of one direction: at every tick the oldest
/// waiting packet goes out if it has arrived, otherwise a dummy; ticks stop
/// once the queue is empty and the tick count is a positive multiple of L.
pub fn oracle_direction(times: &[f64], rho: f64, bucket: u32) -> Vec<(f64, bool)> {
    let mut out = Vec::new();
    let mut next = 0;
    let mut tick: u64 = 0;
    loop {
        tick += 1;
        let at = tick as f64 * rho;
        if next < times.len() && at >= times[next] - EPS {
            out.push((at, false));
            next += 1;
        } else {
            out.push((at, true));
        }
        if next == times.len() && tick.is_multiple_of(bucket as u64) {
            return out;
        }
    }
}

/// The full defended cell list `(time, direction, is_dummy)`, outgoing first on ties.
pub fn oracle_defend(trace: &Trace, p: &TamarawParams) -> Vec<(f64, Direction, bool)> {
    let times = |d: Direction| -> Vec<f64> {
        trace
            .packets
            .iter()
            .filter(|x| x.direction == d)
            .map(|x| x.time)
            .collect()
    };
    let mut all: Vec<(f64, Direction, bool)> = oracle_direction(&times(Direction::Out), p.rho_out, p.bucket)
        .into_iter()
        .map(|(t, d)| (t, Direction::Out, d))
        .chain(
            oracle_direction(&times(Direction::In), p.rho_in, p.bucket)
                .into_iter()
                .map(|(t, d)| (t, Direction::In, d)),
        )
        .collect();
    all.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then((a.1 == Direction::In).cmp(&(b.1 == Direction::In)))
    });
    all
}

/// Majority-guess accuracy over arbitrary observation keys.
pub fn oracle_majority<K: Ord>(labeled: &[(u32, K)]) -> f64 {
    let mut buckets: BTreeMap<&K, BTreeMap<u32, usize>> = BTreeMap::new();
    for (s, k) in labeled {
        *buckets.entry(k).or_default().entry(*s).or_default() += 1;
    }
    let hit: usize = buckets.values().map(|m| m.values().copied().max().unwrap()).sum();
    hit as f64 / labeled.len() as f64
}

/// `Σ_b P(b) · max_site|b ∩ site| / |b|` over all buckets of all sets.
pub fn oracle_inverse_delta_sum<K: Ord>(sets: &[Vec<(u32, K)>], weights: &[f64]) -> f64 {
    let mut total = 0.0;
    for (set, w) in sets.iter().zip(weights) {
        let mut buckets: BTreeMap<&K, Vec<u32>> = BTreeMap::new();
        for (s, k) in set {
            buckets.entry(k).or_default().push(*s);
        }
        for sites in buckets.values() {
            let mut counts: HashMap<u32, usize> = HashMap::new();
            for s in sites {
                *counts.entry(*s).or_default() += 1;
            }
            let max = *counts.values().max().unwrap() as f64;
            let p = w * sites.len() as f64 / set.len() as f64;
            total += p / (sites.len() as f64 / max);
        }
    }
    total
}

/// Indices of points no other point dominates, by pairwise comparison.
pub fn oracle_pareto(points: &[(f64, f64)]) -> Vec<usize> {
    (0..points.len())
        .filter(|&i| {
            let (b, t) = points[i];
            !points.iter().any(|&(qb, qt)| qb <= b && qt <= t && (qb < b || qt < t))
        })
        .collect()
}

/// Adjusted Rand index by explicit pair counting.
pub fn oracle_ari(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len();
    let (mut both, mut only_a, mut only_b, mut pairs) = (0f64, 0f64, 0f64, 0f64);
    for i in 0..n {
        for j in i + 1..n {
            let sa = a[i] == a[j];
            let sb = b[i] == b[j];
            pairs += 1.0;
            match (sa, sb) {
                (true, true) => both += 1.0,
                (true, false) => only_a += 1.0,
                (false, true) => only_b += 1.0,
                _ => {}
            }
        }
    }
    let sum_a = both + only_a;
    let sum_b = both + only_b;
    let expected = sum_a * sum_b / pairs;
    let max = (sum_a + sum_b) / 2.0;
    if (max - expected).abs() < 1e-12 {
        return 1.0;
    }
    (both - expected) / (max - expected)
}

/// Every partition of `0..n` into blocks of at least `min_block` items.
pub fn partitions(n: usize, min_block: usize) -> Vec<Vec<Vec<usize>>> {
    fn rec(i: usize, n: usize, cur: &mut Vec<Vec<usize>>, out: &mut Vec<Vec<Vec<usize>>>, min_block: usize) {
        if i == n {
            if cur.iter().all(|b| b.len() >= min_block) {
                out.push(cur.clone());
            }
            return;
        }
        for b in 0..cur.len() {
            cur[b].push(i);
            rec(i + 1, n, cur, out, min_block);
            cur[b].pop();
        }
        cur.push(vec![i]);
        rec(i + 1, n, cur, out, min_block);
        cur.pop();
    }
    let mut out = Vec::new();
    rec(0, n, &mut Vec::new(), &mut out, min_block);
    out
}

/// Per-direction defended cell counts by direct slot counting.
pub fn oracle_lengths(trace: &Trace, p: &TamarawParams) -> (u32, u32) {
    let count = |d: Direction, rho: f64| -> u32 {
        let times: Vec<f64> = trace
            .packets
            .iter()
            .filter(|x| x.direction == d)
            .map(|x| x.time)
            .collect();
        oracle_direction(&times, rho, p.bucket).len() as u32
    };
    (count(Direction::Out, p.rho_out), count(Direction::In, p.rho_in))
}

/// A trace with `n_out` and `n_in` packets all at time zero, so every
/// schedule sends them in the first slots.
pub fn burst(site: u32, instance: u32, n_out: usize, n_in: usize) -> Trace {
    let mut pk = vec![Packet::new(0.0, Direction::Out); n_out.max(1)];
    pk.extend(std::iter::repeat_n(Packet::new(0.0, Direction::In), n_in));
    Trace::new(pk, site, instance)
}

/// Patterns of identical burst traces, one shape group per entry of
/// `group_sizes`, each pattern from its own site. Shapes are far apart in
/// size so no schedule in the returned grid maps two shapes to the same
/// lengths. Pattern ids are shuffled.
pub fn shape_fixture(
    rng: &mut impl Rng,
    group_sizes: &[usize],
) -> (Vec<Trace>, Vec<tamaraw_core::anonymity::Pattern>, Vec<TamarawParams>) {
    use rand::seq::SliceRandom;
    let sizes = [15usize, 150, 1500, 9000, 30000, 60000];
    let mut shape_ids: Vec<usize> = group_sizes
        .iter()
        .enumerate()
        .flat_map(|(g, &n)| std::iter::repeat_n(g, n))
        .collect();
    shape_ids.shuffle(rng);
    let per_pattern = rng.random_range(1..=4);
    let mut traces = Vec::new();
    let mut patterns = Vec::new();
    for (id, &g) in shape_ids.iter().enumerate() {
        let start = traces.len();
        for i in 0..per_pattern {
            traces.push(burst(id as u32, i as u32, 2, sizes[g]));
        }
        patterns.push(tamaraw_core::anonymity::Pattern {
            pattern_id: id as u32,
            site_id: id as u32,
            local_index: 0,
            members: (start..traces.len()).collect(),
        });
    }
    let grid = vec![
        TamarawParams::new(0.01, 0.002, 10).unwrap(),
        TamarawParams::new(0.04, 0.012, 10).unwrap(),
        TamarawParams::new(0.1, 0.05, 5).unwrap(),
    ];
    (traces, patterns, grid)
}

/// Mean over sets of the grid-averaged majority accuracy.
pub fn partition_objective(
    blocks: &[Vec<usize>],
    patterns: &[tamaraw_core::anonymity::Pattern],
    traces: &[Trace],
    grid: &[TamarawParams],
) -> f64 {
    let per_set: Vec<f64> = blocks
        .iter()
        .map(|b| {
            grid.iter()
                .map(|p| {
                    let labeled: Vec<(u32, (u32, u32))> = b
                        .iter()
                        .flat_map(|&i| patterns[i].members.iter())
                        .map(|&m| (traces[m].site_id, oracle_lengths(&traces[m], p)))
                        .collect();
                    oracle_majority(&labeled)
                })
                .sum::<f64>()
                / grid.len() as f64
        })
        .collect();
    per_set.iter().sum::<f64>() / per_set.len() as f64
}

/// Minimum of [`partition_objective`] over every partition with blocks of at least `k`.
pub fn exhaustive_minimum(
    patterns: &[tamaraw_core::anonymity::Pattern],
    traces: &[Trace],
    grid: &[TamarawParams],
    k: usize,
) -> f64 {
    partitions(patterns.len(), k)
        .iter()
        .filter(|p| p.len() == patterns.len() / k)
        .map(|p| partition_objective(p, patterns, traces, grid))
        .fold(f64::INFINITY, f64::min)
}

/// Flattened TAM by direct binning: slot `floor(t / w)` (times on a slot
/// boundary count in the later slot), packets past the window dropped.
pub fn oracle_tam(trace: &Trace, slot_width: f64, n_slots: usize) -> Vec<f64> {
    let mut v = vec![0.0; 2 * n_slots];
    for p in &trace.packets {
        let slot = (p.time / slot_width + EPS).floor() as usize;
        if slot < n_slots {
            let row = if p.direction == Direction::Out { 0 } else { n_slots };
            v[row + slot] += 1.0;
        }
    }
    v
}

pub fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Smallest distance between pattern centroids over the largest mean
/// member-to-centroid distance.
pub fn separation_ratio(tams: &[Vec<f64>], labels: &[usize]) -> f64 {
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let dim = tams[0].len();
    let mut centroids = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (t, &l) in tams.iter().zip(labels) {
        for (c, x) in centroids[l].iter_mut().zip(t) {
            *c += x;
        }
        counts[l] += 1;
    }
    for (c, &n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|x| *x /= n as f64);
    }
    let mut spread = 0.0f64;
    for (l, centroid) in centroids.iter().enumerate() {
        let members: Vec<&Vec<f64>> = tams
            .iter()
            .zip(labels)
            .filter(|(_, &x)| x == l)
            .map(|(t, _)| t)
            .collect();
        let mean = members.iter().map(|t| euclid(t, centroid)).sum::<f64>() / members.len() as f64;
        spread = spread.max(mean);
    }
    let mut gap = f64::INFINITY;
    for a in 0..k {
        for b in a + 1..k {
            gap = gap.min(euclid(&centroids[a], &centroids[b]));
        }
    }
    if spread == 0.0 {
        f64::INFINITY
    } else {
        gap / spread
    }
}

/// One site's traces drawn from `n_patterns` random planted patterns, with labels.
pub fn planted_site(seed: u64, site: u32, n_patterns: usize, per_pattern: usize) -> (Vec<Trace>, Vec<usize>) {
    use tamaraw_core::synth::{instance, random_pattern};
    let mut r = rng(seed ^ ((site as u64) << 16));
    let patterns: Vec<_> = (0..n_patterns).map(|_| random_pattern(&mut r)).collect();
    let mut traces = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n_patterns * per_pattern {
        let l = i % n_patterns;
        traces.push(instance(&patterns[l], 0.08, 0.015, &mut r, site, i as u32));
        labels.push(l);
    }
    (traces, labels)
}

/// Tick simulation of one direction with a rate change: `c` ticks at the
/// global rate, then ticks at `tau + j * rho_local` until the queue is empty
/// and the overall tick count is a positive multiple of L.
pub fn oracle_switch_direction(
    times: &[f64],
    rho_global: f64,
    c: u64,
    tau: f64,
    rho_local: f64,
    bucket: u32,
) -> Vec<(f64, bool)> {
    let mut out = Vec::new();
    let mut next = 0;
    let mut tick: u64 = 0;
    loop {
        let done = next == times.len() && tick > 0 && tick.is_multiple_of(bucket as u64);
        if done && tick >= c {
            return out;
        }
        tick += 1;
        let at = if tick <= c {
            tick as f64 * rho_global
        } else {
            tau + (tick - c) as f64 * rho_local
        };
        if next < times.len() && at >= times[next] - EPS {
            out.push((at, false));
            next += 1;
        } else {
            out.push((at, true));
        }
    }
}

/// Number of global ticks that fit before `tau`, capped at the length of the
/// unswitched schedule.
pub fn oracle_phase1(times: &[f64], rho_global: f64, bucket: u32, tau: f64) -> u64 {
    let full = oracle_direction(times, rho_global, bucket).len() as u64;
    ((tau / rho_global + EPS).floor() as u64).min(full)
}

/// Every split of at most six patterns into shape groups, with every k that
/// leaves at least one set.
pub fn shape_cases() -> Vec<(Vec<usize>, usize)> {
    fn compositions(left: usize, max: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if left == 0 {
            out.push(prefix.clone());
            return;
        }
        for g in (1..=left.min(max)).rev() {
            prefix.push(g);
            compositions(left - g, g, prefix, out);
            prefix.pop();
        }
    }
    let mut cases = Vec::new();
    for n in 2..=6 {
        let mut groups = Vec::new();
        compositions(n, n, &mut Vec::new(), &mut groups);
        for g in groups.into_iter().filter(|g| g.len() <= 6) {
            for k in 2..=n.min(3) {
                cases.push((g.clone(), k));
            }
        }
    }
    cases
}
