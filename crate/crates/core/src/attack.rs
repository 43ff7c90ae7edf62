//! Closed-world kFP attacker on defended traces, checked against the bound.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anonymity::attacker_accuracy;
use crate::detector::features::extract_kfp_features;
use crate::detector::kfp::KfpModel;
use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::tamaraw::{DefendedTrace, TamarawParams};
use crate::trace::Trace;

pub const DEFAULT_TOLERANCE: f64 = 0.03;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub accuracy: f64,
    pub predictions: Vec<u32>,
    /// `(true site, predicted site, count)`, sorted.
    pub confusion: Vec<(u32, u32, usize)>,
}

/// Trains kFP on site labels of `train` and returns its accuracy on `test`.
pub fn closed_world_attack(train: &[Trace], test: &[Trace], config: &DetectorConfig) -> Result<AttackOutcome> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::InsufficientData("attack needs training and test traces".into()));
    }
    let labels: Vec<u32> = train.iter().map(|t| t.site_id).collect();
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::InsufficientData(
            "attack training data holds a single site".into(),
        ));
    }
    let features: Vec<Vec<f64>> = train.par_iter().map(|t| extract_kfp_features(&t.packets)).collect();
    let model = KfpModel::train(&features, &labels, config.k_nn, &config.forest)?;
    let predictions: Vec<u32> = test.par_iter().map(|t| model.predict_trace(t)).collect();
    let mut confusion: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    let mut correct = 0;
    for (t, &p) in test.iter().zip(&predictions) {
        *confusion.entry((t.site_id, p)).or_default() += 1;
        correct += usize::from(t.site_id == p);
    }
    Ok(AttackOutcome {
        accuracy: correct as f64 / test.len() as f64,
        predictions,
        confusion: confusion.into_iter().map(|((a, b), n)| (a, b, n)).collect(),
    })
}

/// Accuracy of guessing the majority site of every distinct observable
/// sequence, evaluated on the same traces. No attacker that sees only the
/// defended cells can beat it on these traces.
pub fn bucket_oracle_accuracy(defended: &[(u32, &DefendedTrace)]) -> f64 {
    let labeled: Vec<(u32, Vec<(u64, crate::trace::Direction)>)> =
        defended.iter().map(|(s, d)| (*s, d.observable())).collect();
    attacker_accuracy(&labeled)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRow {
    pub params: TamarawParams,
    /// Bound on the evaluated traces.
    pub bound: f64,
    pub kfp_accuracy: f64,
    pub oracle_accuracy: f64,
    pub confusion: Vec<(u32, u32, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub rows: Vec<AttackRow>,
}

impl AttackReport {
    /// `rho_out,rho_in,bound,kfp_accuracy`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("rho_out,rho_in,bound,kfp_accuracy\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.6},{:.6}\n",
                r.params.rho_out, r.params.rho_in, r.bound, r.kfp_accuracy
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub params: TamarawParams,
    pub kfp_accuracy: f64,
    pub oracle_accuracy: f64,
    pub bound: f64,
    pub confusion: Vec<(u32, u32, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub passed: bool,
    pub tolerance: f64,
    pub violations: Vec<Violation>,
}

/// Every kFP accuracy must stay within `tolerance` of its bound, and every
/// oracle accuracy must not exceed it at all (up to rounding).
pub fn compare_with_bound(report: &AttackReport, tolerance: f64) -> Verdict {
    let violations: Vec<Violation> = report
        .rows
        .iter()
        .filter(|r| r.kfp_accuracy > r.bound + tolerance || r.oracle_accuracy > r.bound + 1e-9)
        .map(|r| Violation {
            params: r.params,
            kfp_accuracy: r.kfp_accuracy,
            oracle_accuracy: r.oracle_accuracy,
            bound: r.bound,
            confusion: r.confusion.clone(),
        })
        .collect();
    Verdict {
        passed: violations.is_empty(),
        tolerance,
        violations,
    }
}
