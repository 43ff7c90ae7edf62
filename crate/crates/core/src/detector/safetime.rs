//! Earliest checkpoints at which each anonymity set is recognized reliably.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafeTimeEntry {
    pub set_id: u32,
    /// `None` when the set never qualifies; its traces never switch.
    pub tau: Option<f64>,
    pub a_full: f64,
    /// `A(t)` at every finite checkpoint.
    pub accuracy: Vec<f64>,
    pub n_validation: usize,
    pub flag: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafeTimeTable {
    pub alpha: f64,
    pub checkpoints: Vec<f64>,
    pub entries: Vec<SafeTimeEntry>,
}

impl SafeTimeTable {
    pub fn tau(&self, set_id: u32) -> Option<f64> {
        self.entries.iter().find(|e| e.set_id == set_id).and_then(|e| e.tau)
    }

    /// Distinct safe times in ascending order.
    pub fn decision_times(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.entries.iter().filter_map(|e| e.tau).collect();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    }

    /// Indices of the checkpoints some set uses as its safe time.
    pub fn safe_indices(&self) -> Vec<usize> {
        self.decision_times()
            .iter()
            .filter_map(|t| self.checkpoints.iter().position(|c| c == t))
            .collect()
    }
}

/// Computes the safe time of each of `n_sets` sets.
///
/// `truth[v]` is the set of validation trace `v`; `routed[v][c]` the set its
/// prefix at checkpoint `c` is routed to, with one extra trailing entry for
/// the complete trace.
pub fn compute_safe_times(
    truth: &[u32],
    routed: &[Vec<Option<u32>>],
    n_sets: usize,
    checkpoints: &[f64],
    alpha: f64,
) -> Result<SafeTimeTable> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidArgument(format!("alpha = {alpha} must lie in (0, 1]")));
    }
    if checkpoints.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("checkpoints must be strictly ascending".into()));
    }
    if truth.len() != routed.len() || routed.iter().any(|r| r.len() != checkpoints.len() + 1) {
        return Err(Error::InvalidArgument(
            "routing table does not match checkpoints".into(),
        ));
    }
    let n_cp = checkpoints.len();
    let mut entries = Vec::with_capacity(n_sets);
    for set in 0..n_sets as u32 {
        let members: Vec<usize> = (0..truth.len()).filter(|&v| truth[v] == set).collect();
        let n = members.len();
        let acc_at = |c: usize| -> f64 {
            if n == 0 {
                return 0.0;
            }
            members.iter().filter(|&&v| routed[v][c] == Some(set)).count() as f64 / n as f64
        };
        let accuracy: Vec<f64> = (0..n_cp).map(acc_at).collect();
        let a_full = acc_at(n_cp);
        let (tau, flag) = if n == 0 {
            (None, Some("no validation traces".to_string()))
        } else if a_full == 0.0 {
            (None, Some("never recognized on complete traces".to_string()))
        } else {
            match accuracy.iter().position(|&a| a >= alpha * a_full) {
                Some(c) => (Some(checkpoints[c]), None),
                None => (None, Some("no checkpoint reaches the target accuracy".to_string())),
            }
        };
        entries.push(SafeTimeEntry {
            set_id: set,
            tau,
            a_full,
            accuracy,
            n_validation: n,
            flag,
        });
    }
    Ok(SafeTimeTable {
        alpha,
        checkpoints: checkpoints.to_vec(),
        entries,
    })
}

/// Single-shot rule: accept the routed set only at exactly its safe time.
pub fn decide(routed: Option<u32>, t: f64, table: &SafeTimeTable) -> Option<u32> {
    let set = routed?;
    (table.tau(set) == Some(t)).then_some(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_from_start() {
        let truth = vec![0, 0, 1];
        let routed = vec![vec![Some(0); 3], vec![Some(0); 3], vec![Some(1); 3]];
        let t = compute_safe_times(&truth, &routed, 2, &[0.5, 1.0], 0.9).unwrap();
        assert_eq!(t.tau(0), Some(0.5));
        assert_eq!(t.tau(1), Some(0.5));
    }

    #[test]
    fn late_and_never() {
        let truth = vec![0, 0, 1];
        let routed = vec![
            vec![None, Some(0), Some(0)],
            vec![Some(1), Some(1), Some(0)],
            vec![Some(0), Some(0), Some(0)],
        ];
        let t = compute_safe_times(&truth, &routed, 3, &[0.5, 1.0], 0.9).unwrap();
        // A_full = 1.0, A(0.5) = 0, A(1.0) = 0.5.
        assert_eq!(t.tau(0), None);
        let t = compute_safe_times(&truth, &routed, 3, &[0.5, 1.0], 0.5).unwrap();
        assert_eq!(t.tau(0), Some(1.0));
        assert_eq!(t.tau(1), None);
        assert!(t.entries[1].flag.is_some());
        assert_eq!(t.entries[2].n_validation, 0);
        assert_eq!(t.decision_times(), vec![1.0]);
    }

    #[test]
    fn decide_is_single_shot() {
        let truth = vec![0];
        let routed = vec![vec![None, Some(0), Some(0)]];
        let t = compute_safe_times(&truth, &routed, 1, &[0.5, 1.0], 1.0).unwrap();
        assert_eq!(decide(Some(0), 0.5, &t), None);
        assert_eq!(decide(Some(0), 1.0, &t), Some(0));
        assert_eq!(decide(None, 1.0, &t), None);
    }

    #[test]
    fn bad_alpha() {
        assert!(compute_safe_times(&[], &[], 0, &[0.5], 0.0).is_err());
        assert!(compute_safe_times(&[], &[], 0, &[1.0, 0.5], 0.5).is_err());
    }
}
