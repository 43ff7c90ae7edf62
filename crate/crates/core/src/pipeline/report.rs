use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::*;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub message: String,
    pub files: Vec<String>,
    /// `(k, L, adaptive total, global total)` per evaluated cell.
    pub overheads: Vec<(usize, u32, f64, f64)>,
    pub bounds: Vec<(usize, u32, f64)>,
    pub attack_passed: Option<bool>,
    pub mean_planted_ari: Option<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.6}"))
}

impl Pipeline {
    /// Collects every tabular result under `report/`.
    pub fn report(&self) -> Result<ReportSummary> {
        let patterns = self.load_patterns()?;
        let sets = self.load_sets()?;
        let (st, _) = self.load_safetimes()?;
        let sim = self.load_simulation()?;
        let bounds = self.load_bounds()?;
        let attack = match self.load_attack() {
            Ok(a) => Some(a),
            Err(Error::MissingArtifact(_)) => None,
            Err(e) => return Err(e),
        };
        let mut files: Vec<(&str, String)> = Vec::new();

        files.push(("report/bounds.csv", bounds.to_csv()));

        let mut overhead_rows = String::from(
            "k,L,adaptive_bandwidth,adaptive_time,global_bandwidth,global_time,correct,wrong,no_decision\n",
        );
        for c in &sim.cells {
            let _ = writeln!(
                overhead_rows,
                "{},{},{:.6},{:.6},{:.6},{:.6},{:.4},{:.4},{:.4}",
                c.k,
                c.bucket,
                c.adaptive_bandwidth,
                c.adaptive_time,
                c.global_bandwidth,
                c.global_time,
                c.correct_rate,
                c.wrong_rate,
                c.no_decision_rate
            );
        }
        files.push(("report/overheads.csv", overhead_rows));

        let mut tradeoff =
            String::from("k,L,rho_out,rho_in,adaptive_bandwidth,adaptive_time,global_bandwidth,global_time,bound\n");
        let mut auc = String::from("k,L,auc_adaptive,auc_global\n");
        let mut budget = String::from("k,L,time_ceiling,adaptive_bandwidth,global_bandwidth\n");
        let mut savings = String::from("k,L,bin_start,bin_end,count\n");
        for c in &sim.cells {
            for p in &c.per_param {
                let a = &p.aggregate;
                let _ = writeln!(
                    tradeoff,
                    "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                    c.k,
                    c.bucket,
                    p.params.rho_out,
                    p.params.rho_in,
                    a.mean_bandwidth,
                    a.mean_time,
                    a.global_mean_bandwidth,
                    a.global_mean_time,
                    p.trace_bound
                );
            }
            let _ = writeln!(auc, "{},{},{:.6},{:.6}", c.k, c.bucket, c.auc_adaptive, c.auc_global);
            for b in &c.time_budget {
                let _ = writeln!(
                    budget,
                    "{},{},{},{},{}",
                    c.k,
                    c.bucket,
                    b.ceiling,
                    opt(b.adaptive),
                    opt(b.global)
                );
            }
            for (i, n) in c.savings.counts.iter().enumerate() {
                let _ = writeln!(
                    savings,
                    "{},{},{},{},{n}",
                    c.k,
                    c.bucket,
                    c.savings.edges[i],
                    c.savings.edges[i + 1]
                );
            }
        }
        files.push(("report/tradeoff.csv", tradeoff));
        files.push(("report/savings.csv", savings));
        files.push(("report/time_budget.csv", budget));
        files.push(("report/auc.csv", auc));

        let mut pur = String::from("k,L,n_sets,mean_purity,reference,mean_distinct_sites\n");
        for c in &sets.configs {
            if let Some(p) = &c.purity {
                let _ = writeln!(
                    pur,
                    "{},{},{},{:.4},{:.4},{:.4}",
                    c.k,
                    c.bucket,
                    c.sets.len(),
                    p.mean,
                    p.reference,
                    p.distinct_sites.iter().sum::<usize>() as f64 / p.distinct_sites.len().max(1) as f64
                );
            }
        }
        files.push(("report/purity.csv", pur));

        let mut det = String::from("checkpoint,site_accuracy,retained\n");
        let grid = crate::detector::Checkpoint::grid(&st.checkpoints);
        for (cp, acc) in grid.iter().zip(&st.site_accuracy) {
            let (label, kept) = match cp {
                crate::detector::Checkpoint::Time(t) => (t.to_string(), st.retained.contains(t)),
                crate::detector::Checkpoint::Full => ("full".to_string(), true),
            };
            let _ = writeln!(det, "{label},{acc:.4},{kept}");
        }
        files.push(("report/detector.csv", det));

        for (name, body) in &files {
            self.ws.write_text(name, body)?;
        }
        let summary = ReportSummary {
            message: String::new(),
            files: files.iter().map(|(n, _)| n.to_string()).collect(),
            overheads: sim
                .cells
                .iter()
                .map(|c| (c.k, c.bucket, c.adaptive_total(), c.global_total()))
                .collect(),
            bounds: bounds.cells.iter().map(|c| (c.k, c.bucket, c.aggregate)).collect(),
            attack_passed: attack.as_ref().map(|a| a.verdict.passed),
            mean_planted_ari: patterns.mean_planted_ari,
        };
        let primary = summary
            .overheads
            .iter()
            .find(|o| o.0 == self.config.k && o.1 == self.config.global.bucket);
        let message = match primary {
            Some((k, l, a, g)) => format!(
                "wrote {} report files; k={k} L={l}: adaptive {a:.3} vs global {g:.3} total overhead",
                summary.files.len() + 1
            ),
            None => format!("wrote {} report files", summary.files.len() + 1),
        };
        let summary = ReportSummary { message, ..summary };
        self.ws
            .write_artifact(REPORT, "report", &self.report_hash()?, &summary)?;
        Ok(summary)
    }

    pub fn report_hash(&self) -> Result<String> {
        Ok(stage_hash(
            "report",
            &serde_json::Value::Null,
            &[&self.simulate_hash()?, &self.bounds_hash()?, &self.attack_hash()?],
        ))
    }
}
