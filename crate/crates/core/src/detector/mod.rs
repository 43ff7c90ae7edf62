//! Two-stage early detector: a site predictor followed by a per-site kFP
//! pattern predictor, with per-set safe times and the single-shot rule.

pub mod container;
pub mod features;
pub mod forest;
pub mod kfp;
pub mod safetime;
pub mod site;

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{compute_tam, truncate_prefix, Trace};
use forest::ForestConfig;
use kfp::KfpModel;
use site::{CentroidPredictor, SitePredictor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Checkpoint {
    Time(f64),
    Full,
}

impl Checkpoint {
    pub fn prefix(&self, trace: &Trace) -> Trace {
        match self {
            Checkpoint::Time(t) => truncate_prefix(trace, *t),
            Checkpoint::Full => trace.clone(),
        }
    }

    /// Finite checkpoints followed by the complete trace.
    pub fn grid(times: &[f64]) -> Vec<Checkpoint> {
        times
            .iter()
            .map(|&t| Checkpoint::Time(t))
            .chain(std::iter::once(Checkpoint::Full))
            .collect()
    }
}

/// Multiples of `step` up to and including `max`.
pub fn checkpoint_grid(step: f64, max: f64) -> Vec<f64> {
    let n = (max / step + 1e-9).floor() as usize;
    (1..=n).map(|i| i as f64 * step).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PatternModel {
    Kfp(KfpModel),
    /// Too little data to train: always the site's largest pattern.
    Fallback {
        pattern: u32,
    },
}

impl PatternModel {
    pub fn predict(&self, prefix: &Trace) -> u32 {
        match self {
            PatternModel::Kfp(m) => m.predict_trace(prefix),
            PatternModel::Fallback { pattern } => *pattern,
        }
    }
}

/// Trains the kFP pattern predictor of one site on prefixes cut at `checkpoint`.
pub fn train_pattern_predictor(
    site_traces: &[&Trace],
    labels: &[u32],
    checkpoint: Checkpoint,
    k_nn: usize,
    forest: &ForestConfig,
) -> Result<KfpModel> {
    let mut sizes: BTreeMap<u32, usize> = BTreeMap::new();
    for &l in labels {
        *sizes.entry(l).or_default() += 1;
    }
    if sizes.values().filter(|&&n| n >= 2).count() < 2 {
        return Err(Error::InsufficientData(
            "pattern predictor needs two patterns with at least two traces each".into(),
        ));
    }
    let prefixes: Vec<Trace> = site_traces.iter().map(|t| checkpoint.prefix(t)).collect();
    let refs: Vec<&Trace> = prefixes.iter().collect();
    KfpModel::train_traces(&refs, labels, k_nn, forest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteModels {
    pub site_id: u32,
    /// Set when the site's models are all fallbacks.
    pub fallback: Option<u32>,
    /// Keyed by checkpoint index; the index equal to the number of finite
    /// checkpoints is the complete trace.
    pub models: BTreeMap<usize, PatternModel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternModels {
    pub checkpoints: Vec<f64>,
    pub k_nn: usize,
    pub sites: Vec<SiteModels>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub k_nn: usize,
    pub forest: ForestConfig,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            k_nn: kfp::DEFAULT_K_NN,
            forest: ForestConfig::default(),
        }
    }
}

fn largest_pattern(labels: &[u32]) -> u32 {
    let mut sizes: BTreeMap<u32, usize> = BTreeMap::new();
    for &l in labels {
        *sizes.entry(l).or_default() += 1;
    }
    let max = sizes.values().copied().max().unwrap_or(0);
    sizes.into_iter().find(|(_, n)| *n == max).map_or(0, |(l, _)| l)
}

impl PatternModels {
    /// Trains one model per (site, checkpoint), the complete trace included.
    /// `by_site` maps a site to its training traces and their pattern labels.
    pub fn train(
        by_site: &BTreeMap<u32, (Vec<&Trace>, Vec<u32>)>,
        checkpoints: &[f64],
        config: &DetectorConfig,
    ) -> Result<PatternModels> {
        let grid = Checkpoint::grid(checkpoints);
        let jobs: Vec<(u32, usize)> = by_site
            .keys()
            .flat_map(|&s| (0..grid.len()).map(move |c| (s, c)))
            .collect();
        let trained: Vec<(u32, usize, Option<PatternModel>)> = jobs
            .par_iter()
            .map(|&(site, c)| {
                let (traces, labels) = &by_site[&site];
                let forest = ForestConfig {
                    seed: config.forest.seed ^ ((site as u64) << 20) ^ c as u64,
                    ..config.forest
                };
                match train_pattern_predictor(traces, labels, grid[c], config.k_nn, &forest) {
                    Ok(m) => Ok((site, c, Some(PatternModel::Kfp(m)))),
                    Err(Error::InsufficientData(_)) => Ok((site, c, None)),
                    Err(e) => Err(e),
                }
            })
            .collect::<Result<_>>()?;
        let mut sites: BTreeMap<u32, SiteModels> = BTreeMap::new();
        for (site, c, model) in trained {
            let labels = &by_site[&site].1;
            let entry = sites.entry(site).or_insert_with(|| SiteModels {
                site_id: site,
                fallback: None,
                models: BTreeMap::new(),
            });
            let model = model.unwrap_or_else(|| {
                let pattern = largest_pattern(labels);
                entry.fallback = Some(pattern);
                PatternModel::Fallback { pattern }
            });
            entry.models.insert(c, model);
        }
        Ok(PatternModels {
            checkpoints: checkpoints.to_vec(),
            k_nn: config.k_nn,
            sites: sites.into_values().collect(),
        })
    }

    pub fn index_of(&self, checkpoint: Checkpoint) -> Option<usize> {
        match checkpoint {
            Checkpoint::Full => Some(self.checkpoints.len()),
            Checkpoint::Time(t) => self.checkpoints.iter().position(|&c| c == t),
        }
    }

    pub fn site(&self, site_id: u32) -> Option<&SiteModels> {
        self.sites
            .binary_search_by_key(&site_id, |s| s.site_id)
            .ok()
            .map(|i| &self.sites[i])
    }

    /// Drops every model whose checkpoint index is not in `keep`.
    pub fn retain(&mut self, keep: &BTreeSet<usize>) {
        for s in &mut self.sites {
            s.models.retain(|c, _| keep.contains(c));
        }
    }

    pub fn predict(&self, site_id: u32, prefix: &Trace, checkpoint: Checkpoint) -> Option<u32> {
        let c = self.index_of(checkpoint)?;
        let s = self.site(site_id)?;
        match s.models.get(&c) {
            Some(m) => Some(m.predict(prefix)),
            None => s.fallback,
        }
    }
}

/// Maps (site, pattern) pairs to anonymity sets.
pub type SetIndex = BTreeMap<(u32, u32), u32>;

/// Runs both stages on the prefix of `trace` at `checkpoint` and returns the
/// (site, pattern) prediction.
pub fn route(
    site: &dyn SitePredictor,
    patterns: &PatternModels,
    trace: &Trace,
    checkpoint: Checkpoint,
) -> Result<Option<(u32, u32)>> {
    let prefix = checkpoint.prefix(trace);
    let Some(s) = site.predict(&prefix, checkpoint)? else {
        return Ok(None);
    };
    Ok(patterns.predict(s.site_id, &prefix, checkpoint).map(|p| (s.site_id, p)))
}

/// Everything the detector needs at run time, as stored in the model container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorBundle {
    pub site: CentroidPredictor,
    pub patterns: PatternModels,
}

/// Full-trace TAM centroid of every pattern of a site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternCentroids {
    pub site_id: u32,
    pub centroids: Vec<Vec<f64>>,
}

impl PatternCentroids {
    pub fn build(
        site_id: u32,
        traces: &[&Trace],
        labels: &[u32],
        n_patterns: usize,
        slot_width: f64,
        n_slots: usize,
    ) -> Result<Self> {
        let mut sums = vec![vec![0.0; 2 * n_slots]; n_patterns];
        let mut counts = vec![0usize; n_patterns];
        for (t, &l) in traces.iter().zip(labels) {
            let tam = compute_tam(t, slot_width, n_slots)?.flatten();
            for (a, x) in sums[l as usize].iter_mut().zip(tam) {
                *a += x;
            }
            counts[l as usize] += 1;
        }
        for (s, &n) in sums.iter_mut().zip(&counts) {
            if n > 0 {
                s.iter_mut().for_each(|v| *v /= n as f64);
            }
        }
        Ok(PatternCentroids {
            site_id,
            centroids: sums,
        })
    }

    /// Index of the nearest centroid; ties pick the lowest index.
    pub fn nearest(&self, trace: &Trace, slot_width: f64, n_slots: usize) -> Result<u32> {
        let tam = compute_tam(trace, slot_width, n_slots)?.flatten();
        let mut best = (f64::INFINITY, 0u32);
        for (i, c) in self.centroids.iter().enumerate() {
            let d: f64 = c.iter().zip(&tam).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.0 {
                best = (d, i as u32);
            }
        }
        Ok(best.1)
    }
}
