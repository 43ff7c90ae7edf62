//! Workspace-driven batch pipeline.
//!
//! Each stage reads the artifacts of the stages it depends on, checks that
//! their recorded config hashes match what the current configuration would
//! produce, and writes its own artifacts. Stages can be re-run independently.

pub mod config;
mod report;
mod stages;
pub mod workspace;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use config::{stage_hash, Mode, PipelineConfig};
pub use report::ReportSummary;
pub use stages::*;
pub use workspace::Workspace;

use crate::error::{Error, Result};
use crate::patterns::{adjusted_rand_index, mine_patterns};
use crate::synth::generate;
use crate::tamaraw::{
    build_param_grid, defend, fast_overhead, mean_overhead, overheads, pareto_filter, Overhead, OverheadPoint,
    TamarawParams,
};
use crate::trace::{compute_tam, load_trace_dir, write_trace_dir, Dataset, Manifest, Split, Trace};

pub const DATASET: &str = "dataset.json";
pub const PARETO: &str = "pareto.json";
pub const PATTERNS: &str = "patterns.json";
pub const SETS: &str = "sets.json";
pub const SAFETIMES: &str = "safetimes.json";
pub const DETECTOR: &str = "models/detector.bin";
pub const SIMULATE: &str = "simulate.json";
pub const BOUNDS: &str = "bounds.json";
pub const ATTACK: &str = "attack.json";
pub const REPORT: &str = "report.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetArtifact {
    /// `synth` or `ingest`.
    pub source: String,
    /// SHA-256 over the ingested trace files, for ingested corpora.
    pub content_digest: Option<String>,
    pub manifest: Manifest,
    /// Planted pattern label per manifest entry, for synthetic corpora.
    pub planted: Option<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoArtifact {
    pub grid: Vec<TamarawParams>,
    pub points: Vec<OverheadPoint>,
    pub pareto: Vec<OverheadPoint>,
    pub n_traces: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SitePatterns {
    pub site_id: u32,
    /// Instance ids of the clustered traces per cluster.
    pub clusters: Vec<Vec<u32>>,
    pub threshold: f64,
    pub cleaning_converged: bool,
    pub planted_ari: Option<f64>,
    pub flag: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternEntry {
    pub pattern_id: u32,
    pub site_id: u32,
    pub local_index: u32,
    pub instances: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternsArtifact {
    pub sites: Vec<SitePatterns>,
    pub patterns: Vec<PatternEntry>,
    pub mean_planted_ari: Option<f64>,
}

/// Traces addressable by `(site, instance)`.
#[derive(Debug, Clone, Default)]
pub struct Store {
    pub traces: Vec<Trace>,
    index: HashMap<(u32, u32), usize>,
}

impl Store {
    pub fn new(traces: Vec<Trace>) -> Store {
        let index = traces
            .iter()
            .enumerate()
            .map(|(i, t)| ((t.site_id, t.instance_id), i))
            .collect();
        Store { traces, index }
    }

    pub fn get(&self, site: u32, instance: u32) -> Option<usize> {
        self.index.get(&(site, instance)).copied()
    }

    pub fn refs(&self) -> Vec<&Trace> {
        self.traces.iter().collect()
    }
}

/// The trace subsets every stage works with.
#[derive(Debug, Clone)]
pub struct Views {
    pub training_sites: BTreeSet<u32>,
    /// Training split of the training sites.
    pub train: Store,
    /// Validation split of the training sites.
    pub validation: Vec<Trace>,
    /// Traces the adaptive defense is evaluated on.
    pub eval: Vec<Trace>,
    /// Attacker training and test traces, drawn from the evaluation sites.
    pub attack_train: Vec<Trace>,
    pub attack_test: Vec<Trace>,
    pub planted: Option<HashMap<(u32, u32), u32>>,
}

/// Per-trace overheads of every grid parameter: `values[param][trace]`.
#[derive(Debug, Clone)]
pub struct OverheadTable {
    pub grid: Vec<TamarawParams>,
    pub values: Vec<Vec<Overhead>>,
}

impl OverheadTable {
    pub fn build(traces: &[Trace], grid: &[TamarawParams]) -> OverheadTable {
        let values = grid
            .par_iter()
            .map(|p| traces.iter().map(|t| fast_overhead(t, p)).collect())
            .collect();
        OverheadTable {
            grid: grid.to_vec(),
            values,
        }
    }

    /// Mean (bandwidth, time) of grid entry `g` over the given traces, summed in order.
    pub fn mean(&self, g: usize, traces: &[usize]) -> (f64, f64) {
        let n = traces.len().max(1) as f64;
        let (b, t) = traces.iter().fold((0.0, 0.0), |(b, t), &i| {
            (b + self.values[g][i].bandwidth, t + self.values[g][i].time)
        });
        (b / n, t / n)
    }

    /// Grid entry strictly better than `base` in both mean overheads on the
    /// traces, with the smallest sum; ties keep grid order.
    pub fn select_local(&self, traces: &[usize], base: (f64, f64)) -> Option<usize> {
        if traces.is_empty() {
            return None;
        }
        let mut best: Option<(f64, usize)> = None;
        for g in 0..self.grid.len() {
            let (b, t) = self.mean(g, traces);
            if b < base.0 && t < base.1 && best.is_none_or(|(s, _)| b + t < s) {
                best = Some((b + t, g));
            }
        }
        best.map(|(_, g)| g)
    }
}

#[derive(Debug)]
pub struct Pipeline {
    pub config: PipelineConfig,
    pub ws: Workspace,
}

fn sha256_hex(bytes: &[u8]) -> String {
    crate::detector::container::hex(&Sha256::digest(bytes))
}

impl Pipeline {
    pub fn new(config: PipelineConfig, workspace: impl Into<std::path::PathBuf>) -> Result<Pipeline> {
        config.validate()?;
        Ok(Pipeline {
            config,
            ws: Workspace::new(workspace),
        })
    }

    fn dataset_params(&self, source: &str, digest: Option<&str>) -> serde_json::Value {
        let c = &self.config;
        match source {
            "synth" => serde_json::json!({
                "source": source, "synth": c.synth_config(), "split": c.split,
            }),
            _ => serde_json::json!({
                "source": source, "digest": digest, "split": c.split, "seed": c.seed,
            }),
        }
    }

    fn write_dataset(
        &self,
        dataset: &Dataset,
        source: &str,
        digest: Option<String>,
        planted: Option<Vec<u32>>,
    ) -> Result<String> {
        self.ws.ensure()?;
        let dir = config::traces_dir(self.ws.root());
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        write_trace_dir(&dir, &dataset.traces)?;
        let manifest = Manifest::for_dataset(dataset, Path::new("traces"));
        let hash = stage_hash("dataset", &self.dataset_params(source, digest.as_deref()), &[]);
        let artifact = DatasetArtifact {
            source: source.to_string(),
            content_digest: digest,
            manifest,
            planted,
        };
        self.ws.write_artifact(DATASET, "dataset", &hash, &artifact)?;
        Ok(hash)
    }

    /// Generates the synthetic corpus into the workspace.
    pub fn synth(&self) -> Result<String> {
        let corpus = generate(&self.config.synth_config());
        let planted: HashMap<(u32, u32), u32> = corpus
            .traces
            .iter()
            .zip(&corpus.planted)
            .map(|(t, &p)| ((t.site_id, t.instance_id), p))
            .collect();
        let dataset = Dataset::new(corpus.traces, self.config.split, self.config.seed);
        let labels = dataset
            .traces
            .iter()
            .map(|t| planted[&(t.site_id, t.instance_id)])
            .collect();
        self.write_dataset(&dataset, "synth", None, Some(labels))?;
        Ok(format!(
            "synthesized {} traces from {} sites",
            dataset.traces.len(),
            dataset.sites().len()
        ))
    }

    /// Copies a directory of `<site>-<instance>` trace files into the workspace.
    pub fn ingest(&self, input: &Path) -> Result<String> {
        let traces = load_trace_dir(input)?;
        if traces.is_empty() {
            return Err(Error::InsufficientData(format!(
                "no trace files in {}",
                input.display()
            )));
        }
        let mut digest_input = Vec::new();
        for t in &traces {
            digest_input.extend_from_slice(format!("{}-{}\n", t.site_id, t.instance_id).as_bytes());
            digest_input.extend_from_slice(t.to_text().as_bytes());
        }
        let dataset = Dataset::new(traces, self.config.split, self.config.seed);
        self.write_dataset(&dataset, "ingest", Some(sha256_hex(&digest_input)), None)?;
        Ok(format!(
            "ingested {} traces from {} sites",
            dataset.traces.len(),
            dataset.sites().len()
        ))
    }

    /// Loads the dataset and checks it against the current configuration.
    pub fn dataset(&self) -> Result<(Dataset, DatasetArtifact, String)> {
        let env = self.ws.read_envelope::<DatasetArtifact>(DATASET)?;
        let expected = stage_hash(
            "dataset",
            &self.dataset_params(&env.data.source, env.data.content_digest.as_deref()),
            &[],
        );
        if env.config_hash != expected {
            return Err(Error::ConfigMismatch {
                path: self.ws.path(DATASET),
                found: env.config_hash,
                expected,
            });
        }
        let dataset = env.data.manifest.load(self.ws.root())?;
        Ok((dataset, env.data, expected))
    }

    pub fn dataset_hash(&self) -> Result<String> {
        Ok(self.dataset()?.2)
    }

    /// Training sites: all of them, or a seeded half when evaluating on unseen sites.
    pub fn training_sites(&self, dataset: &Dataset) -> BTreeSet<u32> {
        let mut sites = dataset.sites();
        match self.config.mode {
            Mode::InTraining => sites.into_iter().collect(),
            Mode::OutOfTraining => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x5EED0F517E5);
                sites.shuffle(&mut rng);
                let half = sites.len().div_ceil(2);
                sites.into_iter().take(half).collect()
            }
        }
    }

    pub fn views(&self) -> Result<Views> {
        let (dataset, artifact, _) = self.dataset()?;
        let training_sites = self.training_sites(&dataset);
        let pick = |split: Option<Split>, training: bool| -> Vec<Trace> {
            dataset
                .traces
                .iter()
                .zip(&dataset.splits)
                .filter(|(t, s)| training_sites.contains(&t.site_id) == training && split.is_none_or(|x| x == **s))
                .map(|(t, _)| t.clone())
                .collect()
        };
        let train = Store::new(pick(Some(Split::Train), true));
        let validation = pick(Some(Split::Validation), true);
        let (eval, attack_train, attack_test) = match self.config.mode {
            Mode::InTraining => (
                pick(Some(Split::Test), true),
                pick(Some(Split::Train), true),
                pick(Some(Split::Test), true),
            ),
            Mode::OutOfTraining => (
                pick(None, false),
                pick(Some(Split::Train), false),
                pick(Some(Split::Test), false),
            ),
        };
        if train.traces.is_empty() {
            return Err(Error::InsufficientData("no training traces".into()));
        }
        let planted = artifact.planted.map(|labels| {
            dataset
                .traces
                .iter()
                .zip(labels)
                .map(|(t, l)| ((t.site_id, t.instance_id), l))
                .collect()
        });
        Ok(Views {
            training_sites,
            train,
            validation,
            eval,
            attack_train,
            attack_test,
            planted,
        })
    }

    /// Sparse TAM rows `site,instance,split,direction,slot,count` for every trace.
    pub fn tam(&self) -> Result<String> {
        let (dataset, _, _) = self.dataset()?;
        let rows: Vec<String> = dataset
            .traces
            .par_iter()
            .zip(&dataset.splits)
            .map(|(t, s)| {
                let tam = compute_tam(t, self.config.slot_width, self.config.n_slots)?;
                let split = serde_json::to_value(s)?.as_str().unwrap_or_default().to_string();
                let mut out = String::new();
                for (dir, counts) in [(1, &tam.out_counts), (-1, &tam.in_counts)] {
                    for (slot, &c) in counts.iter().enumerate() {
                        if c > 0 {
                            let _ = writeln!(out, "{},{},{split},{dir},{slot},{c}", t.site_id, t.instance_id);
                        }
                    }
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;
        let mut csv = String::from("site,instance,split,direction,slot,count\n");
        for r in rows {
            csv.push_str(&r);
        }
        self.ws.write_text("tams.csv", &csv)?;
        Ok(format!("wrote TAMs of {} traces", dataset.traces.len()))
    }

    /// Pure schedule over every trace: per-trace counts and overheads.
    pub fn defend_all(&self, params: &TamarawParams) -> Result<String> {
        let (dataset, _, _) = self.dataset()?;
        let rows: Vec<String> = dataset
            .traces
            .par_iter()
            .map(|t| {
                let d = defend(t, params)?;
                let o = overheads(t, &d)?;
                Ok(format!(
                    "{},{},{},{},{:.6},{:.6}\n",
                    t.site_id, t.instance_id, d.n_out, d.n_in, o.bandwidth, o.time
                ))
            })
            .collect::<Result<_>>()?;
        let mut csv = String::from("site,instance,n_out,n_in,bandwidth,time\n");
        for r in rows {
            csv.push_str(&r);
        }
        self.ws.write_text("defend.csv", &csv)?;
        let mean = mean_overhead(&dataset.traces, params);
        Ok(format!(
            "defended {} traces: mean bandwidth {:.3}, mean time {:.3}",
            dataset.traces.len(),
            mean.bandwidth,
            mean.time
        ))
    }

    pub fn pareto_hash(&self) -> Result<String> {
        let c = &self.config;
        let params = serde_json::json!({
            "global": c.global, "factor": c.grid_factor, "steps": c.grid_steps, "mode": c.mode,
        });
        Ok(stage_hash("pareto", &params, &[&self.dataset_hash()?]))
    }

    pub fn grid(&self, bucket: u32) -> Result<Vec<TamarawParams>> {
        build_param_grid(
            &self.config.global.with_bucket(bucket),
            self.config.grid_factor,
            self.config.grid_steps,
        )
    }

    pub fn pareto(&self) -> Result<String> {
        let views = self.views()?;
        let grid = self.grid(self.config.global.bucket)?;
        let table = OverheadTable::build(&views.train.traces, &grid);
        let all: Vec<usize> = (0..views.train.traces.len()).collect();
        let points: Vec<OverheadPoint> = (0..grid.len())
            .map(|g| {
                let (bandwidth, time) = table.mean(g, &all);
                OverheadPoint {
                    params: grid[g],
                    bandwidth,
                    time,
                }
            })
            .collect();
        let pareto = pareto_filter(&points);
        let mut csv = String::from("rho_in,rho_out,L,bandwidth,time\n");
        for p in &pareto {
            let _ = writeln!(
                csv,
                "{},{},{},{:.6},{:.6}",
                p.params.rho_in, p.params.rho_out, p.params.bucket, p.bandwidth, p.time
            );
        }
        let artifact = ParetoArtifact {
            grid,
            points,
            n_traces: views.train.traces.len(),
            pareto,
        };
        self.ws
            .write_artifact(PARETO, "pareto", &self.pareto_hash()?, &artifact)?;
        self.ws.write_text("pareto.csv", &csv)?;
        Ok(format!(
            "{} of {} grid points are Pareto-optimal",
            artifact.pareto.len(),
            artifact.grid.len()
        ))
    }

    pub fn load_pareto(&self) -> Result<ParetoArtifact> {
        self.ws.read_artifact(PARETO, &self.pareto_hash()?)
    }

    pub fn patterns_hash(&self) -> Result<String> {
        let c = &self.config;
        let params = serde_json::json!({ "cast": c.cast(), "mode": c.mode });
        Ok(stage_hash("patterns", &params, &[&self.dataset_hash()?]))
    }

    pub fn patterns(&self) -> Result<String> {
        let views = self.views()?;
        let cast = self.config.cast();
        let mut by_site: BTreeMap<u32, Vec<&Trace>> = BTreeMap::new();
        for t in &views.train.traces {
            by_site.entry(t.site_id).or_default().push(t);
        }
        let sites: Vec<SitePatterns> = by_site
            .par_iter()
            .map(|(&site, traces)| {
                let owned: Vec<Trace> = traces.iter().map(|t| (*t).clone()).collect();
                let (clusters, threshold, converged, flag) = match mine_patterns(&owned, &cast) {
                    Ok(ps) => (ps.clusters, ps.threshold, ps.cleaning_converged, None),
                    Err(Error::InsufficientData(m)) | Err(Error::InvalidArgument(m)) => {
                        (vec![(0..owned.len()).collect()], 0.0, true, Some(m))
                    }
                    Err(e) => return Err(e),
                };
                let planted_ari = views.planted.as_ref().map(|p| {
                    let truth: Vec<usize> = owned.iter().map(|t| p[&(t.site_id, t.instance_id)] as usize).collect();
                    let mut found = vec![0usize; owned.len()];
                    for (c, members) in clusters.iter().enumerate() {
                        for &m in members {
                            found[m] = c;
                        }
                    }
                    adjusted_rand_index(&truth, &found)
                });
                Ok(SitePatterns {
                    site_id: site,
                    clusters: clusters
                        .iter()
                        .map(|c| c.iter().map(|&i| owned[i].instance_id).collect())
                        .collect(),
                    threshold,
                    cleaning_converged: converged,
                    planted_ari,
                    flag,
                })
            })
            .collect::<Result<_>>()?;
        let mut patterns = Vec::new();
        let mut csv = String::from("site,instance,pattern_id,local_index\n");
        for s in &sites {
            for (li, members) in s.clusters.iter().enumerate() {
                let id = patterns.len() as u32;
                for m in members {
                    let _ = writeln!(csv, "{},{m},{id},{li}", s.site_id);
                }
                patterns.push(PatternEntry {
                    pattern_id: id,
                    site_id: s.site_id,
                    local_index: li as u32,
                    instances: members.clone(),
                });
            }
        }
        let aris: Vec<f64> = sites.iter().filter_map(|s| s.planted_ari).collect();
        let mean_planted_ari = (!aris.is_empty()).then(|| aris.iter().sum::<f64>() / aris.len() as f64);
        let artifact = PatternsArtifact {
            sites,
            patterns,
            mean_planted_ari,
        };
        self.ws
            .write_artifact(PATTERNS, "patterns", &self.patterns_hash()?, &artifact)?;
        self.ws.write_text("patterns.csv", &csv)?;
        Ok(format!(
            "mined {} patterns over {} sites{}",
            artifact.patterns.len(),
            artifact.sites.len(),
            mean_planted_ari.map_or(String::new(), |a| format!(" (mean ARI vs planted {a:.3})"))
        ))
    }

    pub fn load_patterns(&self) -> Result<PatternsArtifact> {
        self.ws.read_artifact(PATTERNS, &self.patterns_hash()?)
    }

    /// Runs every stage in order.
    pub fn run_all(&self) -> Result<Vec<String>> {
        let mut log = Vec::new();
        if !self.ws.path(DATASET).exists() {
            log.push(self.synth()?);
        }
        log.push(self.pareto()?);
        log.push(self.patterns()?);
        log.push(self.sets()?);
        log.push(self.safetimes()?);
        log.push(self.simulate()?);
        log.push(self.bounds()?);
        log.push(self.attack()?);
        log.push(self.report()?.message);
        Ok(log)
    }
}
