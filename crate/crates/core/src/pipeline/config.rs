//! Pipeline configuration and the stage hashes derived from it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bound::Weighting;
use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::patterns::{CastConfig, ExpansionMetric};
use crate::synth::SynthConfig;
use crate::tamaraw::TamarawParams;
use crate::trace::{SplitRatio, DEFAULT_N_SLOTS, DEFAULT_SLOT_WIDTH};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Evaluate on held-out traces of the sites used for training.
    #[default]
    InTraining,
    /// Train on half of the sites and evaluate on the other half.
    OutOfTraining,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Master seed; also replaces `synth.seed`.
    pub seed: u64,
    pub mode: Mode,
    pub synth: SynthConfig,
    pub split: SplitRatio,
    pub slot_width: f64,
    pub n_slots: usize,
    pub k_neighbors: usize,
    pub max_clusters: usize,
    pub expansion: ExpansionMetric,
    pub alpha: f64,
    pub checkpoint_step: f64,
    pub checkpoint_max: f64,
    /// Centre of the parameter grid; its bucket size is the primary L.
    pub global: TamarawParams,
    pub grid_factor: f64,
    pub grid_steps: usize,
    /// k values swept by `sets` and `bounds`.
    pub ks: Vec<usize>,
    /// Bucket sizes swept by `sets`, `bounds` and `simulate`.
    pub ls: Vec<u32>,
    /// k values evaluated by `simulate`.
    pub table_ks: Vec<usize>,
    /// Primary k, used by `attack`.
    pub k: usize,
    pub weighting: Weighting,
    pub detector: DetectorConfig,
    /// Command line of an external site predictor; the built-in
    /// nearest-centroid predictor is used when empty.
    pub external_predictor: Vec<String>,
    pub attack_tolerance: f64,
    pub savings_bin_width: f64,
    pub time_ceilings: Vec<f64>,
    /// Also group whole websites by TAM super-matrix as a comparison.
    pub website_diagnostic: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 7,
            mode: Mode::InTraining,
            synth: SynthConfig::default(),
            split: SplitRatio::default(),
            slot_width: DEFAULT_SLOT_WIDTH,
            n_slots: DEFAULT_N_SLOTS,
            k_neighbors: 7,
            max_clusters: 6,
            expansion: ExpansionMetric::Similarity,
            alpha: 0.9,
            checkpoint_step: 0.5,
            checkpoint_max: 20.0,
            global: TamarawParams {
                rho_out: 0.04,
                rho_in: 0.012,
                bucket: 100,
            },
            grid_factor: 7.0,
            grid_steps: 14,
            ks: vec![2, 4, 7, 15, 30],
            ls: vec![100, 500, 1000],
            table_ks: vec![2, 7, 30],
            k: 7,
            weighting: Weighting::Proportional,
            detector: DetectorConfig::default(),
            external_predictor: Vec::new(),
            attack_tolerance: crate::attack::DEFAULT_TOLERANCE,
            savings_bin_width: 0.25,
            time_ceilings: vec![0.10, 0.45, 1.25, 2.50],
            website_diagnostic: false,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<PipelineConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::InvalidArgument(format!("config {}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.global.validate()?;
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.slot_width > 0.0) || self.n_slots == 0 {
            return bad("slot_width and n_slots must be positive");
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad("alpha must lie in (0, 1]");
        }
        if !(self.checkpoint_step > 0.0) || self.checkpoint_max < self.checkpoint_step {
            return bad("checkpoint_step must be positive and not above checkpoint_max");
        }
        if !(self.grid_factor > 1.0) || self.grid_steps == 0 {
            return bad("grid_factor must exceed 1 and grid_steps must be positive");
        }
        if self
            .ks
            .iter()
            .chain(&self.table_ks)
            .chain(std::iter::once(&self.k))
            .any(|&k| k < 2)
        {
            return bad("every k must be at least 2");
        }
        if self.ls.is_empty() || self.ls.contains(&0) {
            return bad("ls must list positive bucket sizes");
        }
        if !self.ls.contains(&self.global.bucket) {
            return bad("the primary bucket size must be one of ls");
        }
        if !self.ks.contains(&self.k) || self.table_ks.iter().any(|k| !self.ks.contains(k)) {
            return bad("k and table_ks must be drawn from ks");
        }
        if self.synth.n_sites < 2 || self.synth.traces_per_site < 4 {
            return bad("synthetic corpus needs at least 2 sites with 4 traces each");
        }
        Ok(())
    }

    pub fn cast(&self) -> CastConfig {
        CastConfig {
            k_neighbors: self.k_neighbors,
            max_clusters: self.max_clusters,
            expansion: self.expansion,
            slot_width: self.slot_width,
            n_slots: self.n_slots,
            ..CastConfig::default()
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed,
            ..self.synth.clone()
        }
    }

    pub fn checkpoints(&self) -> Vec<f64> {
        crate::detector::checkpoint_grid(self.checkpoint_step, self.checkpoint_max)
    }

    pub fn detector_config(&self) -> DetectorConfig {
        let mut d = self.detector;
        d.forest.seed ^= self.seed;
        d
    }
}

/// First 16 hex digits of the SHA-256 of `{stage, params, upstream}`.
pub fn stage_hash(stage: &str, params: &serde_json::Value, upstream: &[&str]) -> String {
    let body = serde_json::json!({ "stage": stage, "params": params, "upstream": upstream });
    let digest = Sha256::digest(body.to_string().as_bytes());
    crate::detector::container::hex(&digest)[..16].to_string()
}

/// Location of the workspace's trace directory.
pub fn traces_dir(workspace: &Path) -> PathBuf {
    workspace.join("traces")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = PipelineConfig::default();
        c.validate().unwrap();
        assert_eq!(c.k_neighbors, 7);
        assert_eq!(c.max_clusters, 6);
        assert_eq!(c.alpha, 0.9);
        assert_eq!(c.slot_width, 0.08);
        assert_eq!(c.checkpoints().len(), 40);
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"kk": 3}"#).is_err());
        let c: PipelineConfig = serde_json::from_str(r#"{"alpha": 0.5}"#).unwrap();
        assert_eq!(c.alpha, 0.5);
        assert_eq!(c.k, 7);
    }

    #[test]
    fn hashes_depend_on_everything() {
        let p = serde_json::json!({"a": 1});
        let h = stage_hash("x", &p, &["u"]);
        assert_eq!(h.len(), 16);
        assert_ne!(h, stage_hash("y", &p, &["u"]));
        assert_ne!(h, stage_hash("x", &serde_json::json!({"a": 2}), &["u"]));
        assert_ne!(h, stage_hash("x", &p, &["v"]));
    }
}
