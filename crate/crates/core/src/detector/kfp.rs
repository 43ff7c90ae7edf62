//! kFP: a random forest whose leaf identifiers serve as fingerprints for a
//! nearest-neighbour vote under Hamming distance.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::features::extract_kfp_features;
use super::forest::{Forest, ForestConfig};
use crate::error::{Error, Result};
use crate::trace::Trace;

pub const DEFAULT_K_NN: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KfpModel {
    pub forest: Forest,
    pub fingerprints: Vec<Vec<u32>>,
    pub labels: Vec<u32>,
    pub k_nn: usize,
}

fn hamming(a: &[u32], b: &[u32]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

impl KfpModel {
    pub fn train(features: &[Vec<f64>], labels: &[u32], k_nn: usize, forest: &ForestConfig) -> Result<KfpModel> {
        if k_nn == 0 {
            return Err(Error::InvalidArgument("k_nn must be at least 1".into()));
        }
        let forest = Forest::train(features, labels, forest)?;
        let fingerprints = features.par_iter().map(|x| forest.fingerprint(x)).collect();
        Ok(KfpModel {
            forest,
            fingerprints,
            labels: labels.to_vec(),
            k_nn,
        })
    }

    pub fn train_traces(traces: &[&Trace], labels: &[u32], k_nn: usize, forest: &ForestConfig) -> Result<KfpModel> {
        let features: Vec<Vec<f64>> = traces.par_iter().map(|t| extract_kfp_features(&t.packets)).collect();
        KfpModel::train(&features, labels, k_nn, forest)
    }

    /// Majority label among the `k_nn` training fingerprints closest to the
    /// query's; distance ties keep training order, vote ties pick the lowest label.
    pub fn predict(&self, features: &[f64]) -> u32 {
        let fp = self.forest.fingerprint(features);
        let mut d: Vec<(usize, usize)> = self
            .fingerprints
            .iter()
            .enumerate()
            .map(|(i, f)| (hamming(&fp, f), i))
            .collect();
        d.sort_unstable();
        let mut votes: BTreeMap<u32, usize> = BTreeMap::new();
        for &(_, i) in d.iter().take(self.k_nn) {
            *votes.entry(self.labels[i]).or_default() += 1;
        }
        let max = votes.values().copied().max().unwrap_or(0);
        votes.into_iter().find(|(_, v)| *v == max).map_or(0, |(l, _)| l)
    }

    pub fn predict_trace(&self, trace: &Trace) -> u32 {
        self.predict(&extract_kfp_features(&trace.packets))
    }
}
