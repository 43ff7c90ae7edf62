//! Attacker-success bounds from weighted pre-image sizes.
//!
//! For a bucket of defended traces that look identical to the attacker, the
//! weighted pre-image size is `|bucket| / max_site |bucket ∩ site|`; its
//! inverse is the success rate of the best possible guess. A set's bound is
//! the bucket-weighted mean of those inverses, and the global bound averages
//! set bounds by set probability.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anonymity::{attacker_accuracy, length_key};
use crate::error::{Error, Result};
use crate::tamaraw::{defended_lengths, TamarawParams};
use crate::trace::Trace;

/// Tolerance for the set-side versus output-side identity and the weight sum.
pub const IDENTITY_TOLERANCE: f64 = 1e-9;

pub const SWITCH_TIME_CAVEAT: &str = "The bound covers the set identity revealed by a switch \
and the post-switch defended lengths. Traces routed to a wrong set switch at that set's time; \
any information carried by such misrouted switches is not quantified.";

/// `|bucket| / max_w |{t in bucket : site(t) = w}|`.
pub fn weighted_delta(bucket_sites: &[u32]) -> Result<f64> {
    if bucket_sites.is_empty() {
        return Err(Error::InvalidArgument("weighted delta of an empty bucket".into()));
    }
    let mut counts: HashMap<u32, usize> = HashMap::new();
    for &s in bucket_sites {
        *counts.entry(s).or_default() += 1;
    }
    let max = counts.values().copied().max().unwrap_or(1);
    Ok(bucket_sites.len() as f64 / max as f64)
}

/// Ā of one set: optimal attacker accuracy over its `(site, bucket)` pairs.
pub fn set_bound<K: Hash + Eq>(labeled: &[(u32, K)]) -> f64 {
    attacker_accuracy(labeled)
}

/// Ā of a set of traces defended with one parameter pair.
pub fn set_bound_traces(traces: &[&Trace], params: &TamarawParams) -> f64 {
    let labeled: Vec<(u32, u64)> = traces
        .iter()
        .map(|t| {
            let (o, i) = defended_lengths(t, params);
            (t.site_id, length_key(o, i))
        })
        .collect();
    set_bound(&labeled)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    /// Share of traces in each set.
    #[default]
    Proportional,
    Uniform,
}

pub fn set_weights(sizes: &[usize], weighting: Weighting) -> Vec<f64> {
    let n = sizes.len();
    match weighting {
        Weighting::Uniform => vec![1.0 / n as f64; n],
        Weighting::Proportional => {
            let total: usize = sizes.iter().sum();
            if total == 0 {
                return vec![1.0 / n as f64; n];
            }
            sizes.iter().map(|&s| s as f64 / total as f64).collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalBound {
    /// `Σ_i P(S_i) Ā(S_i)`.
    pub value: f64,
    pub per_set: Vec<f64>,
    pub weights: Vec<f64>,
    /// The same quantity enumerated over defended outputs.
    pub output_side: f64,
}

/// Σ over every (set, bucket) of `P(f') / δ̃(f')`, written independently of
/// the per-set majority sums.
fn output_side_expectation<K: Hash + Eq>(sets: &[Vec<(u32, K)>], weights: &[f64]) -> Result<f64> {
    let mut terms = Vec::new();
    for (set, &w) in sets.iter().zip(weights) {
        if set.is_empty() {
            continue;
        }
        let mut buckets: HashMap<&K, Vec<u32>> = HashMap::new();
        for (site, key) in set {
            buckets.entry(key).or_default().push(*site);
        }
        for sites in buckets.values() {
            let p_output = w * sites.len() as f64 / set.len() as f64;
            terms.push(p_output / weighted_delta(sites)?);
        }
    }
    // Bucket order comes from a hash map; sort so the sum is reproducible.
    terms.sort_by(f64::total_cmp);
    Ok(terms.iter().sum())
}

/// Global bound over sets with given probabilities. Checks that the weights
/// sum to one and that the set-side and output-side expectations agree.
pub fn global_bound<K: Hash + Eq>(sets: &[Vec<(u32, K)>], weights: &[f64]) -> Result<GlobalBound> {
    if sets.len() != weights.len() {
        return Err(Error::InvalidArgument(format!(
            "{} sets but {} weights",
            sets.len(),
            weights.len()
        )));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > IDENTITY_TOLERANCE || weights.iter().any(|w| *w < 0.0) {
        return Err(Error::WeightSum(sum));
    }
    let per_set: Vec<f64> = sets.iter().map(|s| set_bound(s)).collect();
    let value: f64 = per_set.iter().zip(weights).map(|(a, w)| a * w).sum();
    let output_side = output_side_expectation(sets, weights)?;
    if (value - output_side).abs() > IDENTITY_TOLERANCE {
        return Err(Error::IdentityViolation {
            set_side: value,
            output_side,
        });
    }
    Ok(GlobalBound {
        value,
        per_set,
        weights: weights.to_vec(),
        output_side,
    })
}

/// Global bound of pure-Tamaraw sets of traces under one parameter pair.
pub fn global_bound_traces(sets: &[Vec<&Trace>], params: &TamarawParams, weighting: Weighting) -> Result<GlobalBound> {
    let labeled: Vec<Vec<(u32, u64)>> = sets
        .par_iter()
        .map(|set| {
            set.iter()
                .map(|t| {
                    let (o, i) = defended_lengths(t, params);
                    (t.site_id, length_key(o, i))
                })
                .collect()
        })
        .collect();
    let sizes: Vec<usize> = sets.iter().map(Vec::len).collect();
    global_bound(&labeled, &set_weights(&sizes, weighting))
}

/// Anonymity sets for one `(k, L)` cell, as lists of trace indices.
#[derive(Debug, Clone)]
pub struct SweepInput {
    pub k: usize,
    pub bucket: u32,
    pub sets: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub k: usize,
    #[serde(rename = "L")]
    pub bucket: u32,
    /// Global bound per Pareto parameter pair.
    pub per_config: Vec<f64>,
    /// Ā per set per Pareto parameter pair, `per_set[set][config]`.
    pub per_set: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    /// Mean of `per_config`.
    pub aggregate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub pareto_params: Vec<TamarawParams>,
    pub cells: Vec<SweepCell>,
    pub caveat: String,
}

impl BoundReport {
    pub fn get(&self, k: usize, bucket: u32) -> Option<&SweepCell> {
        self.cells.iter().find(|c| c.k == k && c.bucket == bucket)
    }

    /// Matrix with one row per k and one column per L.
    pub fn to_csv(&self) -> String {
        let ks: Vec<usize> = {
            let mut v: Vec<usize> = self.cells.iter().map(|c| c.k).collect();
            v.sort_unstable();
            v.dedup();
            v
        };
        let ls: Vec<u32> = {
            let mut v: Vec<u32> = self.cells.iter().map(|c| c.bucket).collect();
            v.sort_unstable();
            v.dedup();
            v
        };
        let mut out = String::from("k");
        for l in &ls {
            out.push_str(&format!(",L={l}"));
        }
        out.push('\n');
        for k in &ks {
            out.push_str(&k.to_string());
            for l in &ls {
                match self.get(*k, *l) {
                    Some(c) => out.push_str(&format!(",{:.6}", c.aggregate)),
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// For each `(k, L)`, the global bound averaged over the Pareto parameters
/// (with their bucket size replaced by `L`).
pub fn bound_sweep(
    inputs: &[SweepInput],
    traces: &[Trace],
    pareto: &[TamarawParams],
    weighting: Weighting,
) -> Result<BoundReport> {
    if pareto.is_empty() {
        return Err(Error::InvalidArgument(
            "bound sweep needs at least one parameter pair".into(),
        ));
    }
    let mut cells = Vec::with_capacity(inputs.len());
    for input in inputs {
        let sets: Vec<Vec<&Trace>> = input
            .sets
            .iter()
            .map(|s| s.iter().map(|&i| &traces[i]).collect())
            .collect();
        let results: Vec<GlobalBound> = pareto
            .par_iter()
            .map(|p| global_bound_traces(&sets, &p.with_bucket(input.bucket), weighting))
            .collect::<Result<_>>()?;
        let per_config: Vec<f64> = results.iter().map(|r| r.value).collect();
        let per_set = (0..sets.len())
            .map(|s| results.iter().map(|r| r.per_set[s]).collect())
            .collect();
        let aggregate = per_config.iter().sum::<f64>() / per_config.len() as f64;
        cells.push(SweepCell {
            k: input.k,
            bucket: input.bucket,
            per_config,
            per_set,
            weights: results[0].weights.clone(),
            aggregate,
        });
    }
    Ok(BoundReport {
        pareto_params: pareto.to_vec(),
        cells,
        caveat: SWITCH_TIME_CAVEAT.to_string(),
    })
}

/// Groups labeled observations into `key -> per-site counts`, for reports.
pub fn bucket_table<K: Ord + Clone>(labeled: &[(u32, K)]) -> BTreeMap<K, BTreeMap<u32, usize>> {
    let mut out: BTreeMap<K, BTreeMap<u32, usize>> = BTreeMap::new();
    for (site, key) in labeled {
        *out.entry(key.clone()).or_default().entry(*site).or_default() += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weighted_delta_examples() {
        assert_eq!(weighted_delta(&[4, 4, 4]).unwrap(), 1.0);
        assert_eq!(weighted_delta(&[1, 2, 3]).unwrap(), 3.0);
        let bucket = [0, 0, 0, 0, 1, 1, 1, 2, 2, 3];
        assert_eq!(weighted_delta(&bucket).unwrap(), 2.5);
        assert!(weighted_delta(&[]).is_err());
    }

    #[test]
    fn set_bound_examples() {
        assert_eq!(set_bound(&[(0, 1u8), (1, 2), (2, 3)]), 1.0);
        assert_eq!(set_bound(&[(0, 1u8), (1, 1), (0, 2), (1, 2)]), 0.5);
    }

    #[test]
    fn global_bound_examples() {
        let one = vec![vec![(0, 1u8), (1, 1), (1, 2)]];
        let g = global_bound(&one, &[1.0]).unwrap();
        assert!((g.value - set_bound(&one[0])).abs() < 1e-12);

        // Ā = 0.2 from five sites in one bucket, Ā = 0.6 from a 3:2 bucket.
        let a: Vec<(u32, u8)> = (0..5).map(|s| (s, 0)).collect();
        let b: Vec<(u32, u8)> = vec![(0, 0), (0, 0), (0, 0), (1, 0), (1, 0)];
        let g = global_bound(&[a, b], &[0.5, 0.5]).unwrap();
        assert!((g.value - 0.4).abs() < 1e-12);
    }

    #[test]
    fn weight_sum_is_checked() {
        let sets = vec![vec![(0, 0u8)], vec![(1, 0u8)]];
        assert!(matches!(global_bound(&sets, &[0.5, 0.6]), Err(Error::WeightSum(_))));
    }

    #[test]
    fn proportional_and_uniform_weights() {
        assert_eq!(set_weights(&[1, 3], Weighting::Proportional), vec![0.25, 0.75]);
        assert_eq!(set_weights(&[1, 3], Weighting::Uniform), vec![0.5, 0.5]);
    }
}
