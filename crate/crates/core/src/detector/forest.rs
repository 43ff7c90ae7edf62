//! A small seeded random forest (CART trees, Gini impurity).

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    /// Features tried per split; `None` means `floor(sqrt(F))`.
    pub features_per_split: Option<usize>,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            n_trees: 100,
            max_depth: 16,
            features_per_split: None,
            bootstrap: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: u32,
        right: u32,
    },
    Leaf {
        label: u32,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    /// Index of the leaf reached by `x`.
    pub fn leaf(&self, x: &[f64]) -> u32 {
        let mut i = 0u32;
        loop {
            match &self.nodes[i as usize] {
                Node::Leaf { .. } => return i,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    pub fn predict(&self, x: &[f64]) -> u32 {
        match &self.nodes[self.leaf(x) as usize] {
            Node::Leaf { label } => *label,
            Node::Split { .. } => unreachable!("leaf() stops at leaves"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub trees: Vec<Tree>,
    pub n_features: usize,
}

fn gini(counts: &[usize], total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let t = total as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / t).powi(2)).sum::<f64>()
}

/// Lowest label among those with the highest count.
fn majority(counts: &[usize], classes: &[u32]) -> u32 {
    let mut best = 0;
    for i in 1..counts.len() {
        if counts[i] > counts[best] || (counts[i] == counts[best] && classes[i] < classes[best]) {
            best = i;
        }
    }
    classes[best]
}

struct Builder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [usize],
    classes: &'a [u32],
    max_depth: usize,
    mtry: usize,
    nodes: Vec<Node>,
}

impl Builder<'_> {
    fn counts(&self, idx: &[usize]) -> Vec<usize> {
        let mut c = vec![0; self.classes.len()];
        for &i in idx {
            c[self.y[i]] += 1;
        }
        c
    }

    fn best_split(&self, idx: &[usize], rng: &mut ChaCha8Rng) -> Option<(usize, f64)> {
        let n_features = self.x[0].len();
        let parent = self.counts(idx);
        let parent_gini = gini(&parent, idx.len());
        let mut best: Option<(f64, usize, f64)> = None;
        // Like common implementations, keep drawing features past `mtry`
        // until at least one admissible split has been seen.
        let features = sample(rng, n_features, n_features).into_vec();
        for (tried, f) in features.into_iter().enumerate() {
            if tried >= self.mtry && best.is_some() {
                break;
            }
            let mut order: Vec<usize> = idx.to_vec();
            order.sort_by(|&a, &b| self.x[a][f].total_cmp(&self.x[b][f]).then(a.cmp(&b)));
            let mut left = vec![0usize; self.classes.len()];
            let mut right = parent.clone();
            for pos in 0..order.len() - 1 {
                let c = self.y[order[pos]];
                left[c] += 1;
                right[c] -= 1;
                let (a, b) = (self.x[order[pos]][f], self.x[order[pos + 1]][f]);
                if a == b {
                    continue;
                }
                let nl = pos + 1;
                let nr = order.len() - nl;
                let score = (nl as f64 * gini(&left, nl) + nr as f64 * gini(&right, nr)) / order.len() as f64;
                if score < parent_gini - 1e-12 && best.is_none_or(|(s, _, _)| score < s) {
                    let mut threshold = a + (b - a) / 2.0;
                    if threshold >= b {
                        threshold = a;
                    }
                    best = Some((score, f, threshold));
                }
            }
        }
        best.map(|(_, f, t)| (f, t))
    }

    fn grow(&mut self, idx: &[usize], depth: usize, rng: &mut ChaCha8Rng) -> u32 {
        let id = self.nodes.len() as u32;
        let counts = self.counts(idx);
        self.nodes.push(Node::Leaf {
            label: majority(&counts, self.classes),
        });
        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        if pure || depth >= self.max_depth || idx.len() < 2 {
            return id;
        }
        let Some((feature, threshold)) = self.best_split(idx, rng) else {
            return id;
        };
        let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| self.x[i][feature] <= threshold);
        let left = self.grow(&l, depth + 1, rng);
        let right = self.grow(&r, depth + 1, rng);
        self.nodes[id as usize] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        id
    }
}

impl Forest {
    pub fn train(x: &[Vec<f64>], labels: &[u32], config: &ForestConfig) -> Result<Forest> {
        if x.is_empty() || x.len() != labels.len() {
            return Err(Error::InsufficientData(format!(
                "forest needs matching non-empty samples and labels ({} vs {})",
                x.len(),
                labels.len()
            )));
        }
        if config.n_trees == 0 {
            return Err(Error::InvalidArgument("forest needs at least one tree".into()));
        }
        let n_features = x[0].len();
        if n_features == 0 || x.iter().any(|r| r.len() != n_features) {
            return Err(Error::InvalidArgument(
                "feature rows must share a non-zero length".into(),
            ));
        }
        let mut classes: Vec<u32> = labels.to_vec();
        classes.sort_unstable();
        classes.dedup();
        let y: Vec<usize> = labels
            .iter()
            .map(|l| classes.binary_search(l).expect("label is in classes"))
            .collect();
        let mtry = config
            .features_per_split
            .unwrap_or_else(|| (n_features as f64).sqrt().floor() as usize)
            .max(1);
        let trees = (0..config.n_trees)
            .into_par_iter()
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                rng.set_stream(t as u64);
                let idx: Vec<usize> = if config.bootstrap {
                    (0..x.len()).map(|_| rng.random_range(0..x.len())).collect()
                } else {
                    (0..x.len()).collect()
                };
                let mut b = Builder {
                    x,
                    y: &y,
                    classes: &classes,
                    max_depth: config.max_depth,
                    mtry,
                    nodes: Vec::new(),
                };
                b.grow(&idx, 0, &mut rng);
                Tree { nodes: b.nodes }
            })
            .collect();
        Ok(Forest { trees, n_features })
    }

    /// Leaf identifier reached in every tree.
    pub fn fingerprint(&self, x: &[f64]) -> Vec<u32> {
        self.trees.iter().map(|t| t.leaf(x)).collect()
    }

    /// Majority vote of the trees, lowest label on ties.
    pub fn predict(&self, x: &[f64]) -> u32 {
        let mut votes: std::collections::BTreeMap<u32, usize> = std::collections::BTreeMap::new();
        for t in &self.trees {
            *votes.entry(t.predict(x)).or_default() += 1;
        }
        let max = votes.values().copied().max().unwrap_or(0);
        votes.into_iter().find(|(_, v)| *v == max).map_or(0, |(l, _)| l)
    }
}
