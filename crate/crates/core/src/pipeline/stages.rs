//! Sets, safe times, simulation, bounds and attack stages.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::*;
use crate::adaptive::{
    area_under_front, evaluate, histogram, simulate_trace, time_budget, trace_averaged_bound, AdaptiveConfig,
    Aggregate, Histogram, TwoStageDetector,
};
use crate::anonymity::{
    attacker_accuracy_traces, build_sets, purity, super_matrix_overhead, super_matrix_sets, LengthCache, Pattern,
    PurityReport,
};
use crate::attack::{
    bucket_oracle_accuracy, closed_world_attack, compare_with_bound, AttackReport, AttackRow, Verdict,
};
use crate::bound::{
    bound_sweep, global_bound, global_bound_traces, set_bound_traces, set_weights, BoundReport, SweepInput,
};
use crate::detector::container;
use crate::detector::safetime::{compute_safe_times, SafeTimeTable};
use crate::detector::site::{CentroidPredictor, ExternalPredictor, SitePredictor};
use crate::detector::{route, Checkpoint, DetectorBundle, PatternCentroids, PatternModels, SetIndex};
use crate::tamaraw::ShapeKey;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetMetrics {
    pub purity: f64,
    pub distinct_sites: usize,
    pub n_traces: usize,
    pub n_patterns: usize,
    /// Attacker accuracy on the set's traces under the global parameters.
    pub global_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetEntry {
    pub set_id: u32,
    /// `(site, pattern index within the site)`.
    pub members: Vec<(u32, u32)>,
    pub pattern_ids: Vec<u32>,
    /// Local parameters relative to the configured global pair.
    pub local_params: Option<TamarawParams>,
    pub metrics: SetMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetsConfig {
    pub k: usize,
    #[serde(rename = "L")]
    pub bucket: u32,
    pub skipped: Option<String>,
    pub sets: Vec<SetEntry>,
    pub purity: Option<PurityReport>,
}

impl SetsConfig {
    pub fn set_index(&self) -> SetIndex {
        let mut idx = SetIndex::new();
        for s in &self.sets {
            for &m in &s.members {
                idx.insert(m, s.set_id);
            }
        }
        idx
    }

    /// Store indices of the traces of every set.
    pub fn trace_indices(&self, patterns: &PatternsArtifact, store: &Store) -> Vec<Vec<usize>> {
        self.sets
            .iter()
            .map(|s| {
                let mut v: Vec<usize> = s
                    .pattern_ids
                    .iter()
                    .flat_map(|&p| {
                        let e = &patterns.patterns[p as usize];
                        e.instances.iter().filter_map(move |&i| store.get(e.site_id, i))
                    })
                    .collect();
                v.sort_unstable();
                v
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WebsiteDiagnostic {
    pub k: usize,
    pub groups: Vec<Vec<u32>>,
    pub bandwidth_proxy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetsArtifact {
    pub configs: Vec<SetsConfig>,
    pub website: Option<WebsiteDiagnostic>,
}

impl SetsArtifact {
    pub fn get(&self, k: usize, bucket: u32) -> Option<&SetsConfig> {
        self.configs.iter().find(|c| c.k == k && c.bucket == bucket)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafeTimeConfig {
    pub k: usize,
    #[serde(rename = "L")]
    pub bucket: u32,
    pub table: SafeTimeTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafeTimesArtifact {
    pub checkpoints: Vec<f64>,
    /// Checkpoints whose pattern models were kept.
    pub retained: Vec<f64>,
    pub detector_sha256: String,
    /// Site-prediction accuracy on validation prefixes per checkpoint, then complete traces.
    pub site_accuracy: Vec<f64>,
    pub fallback_sites: Vec<u32>,
    pub configs: Vec<SafeTimeConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorArtifact {
    pub bundle: DetectorBundle,
    pub centroids: Vec<PatternCentroids>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub params: TamarawParams,
    pub aggregate: Aggregate,
    /// Bound averaged over the evaluated traces.
    pub trace_bound: f64,
    pub sets_with_local: usize,
    /// Every switching trace switched at its set's safe time, at most once.
    pub single_shot: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetRow {
    pub ceiling: f64,
    pub adaptive: Option<f64>,
    pub global: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationCell {
    pub k: usize,
    #[serde(rename = "L")]
    pub bucket: u32,
    pub per_param: Vec<ParamSummary>,
    pub adaptive_bandwidth: f64,
    pub adaptive_time: f64,
    pub global_bandwidth: f64,
    pub global_time: f64,
    pub auc_adaptive: f64,
    pub auc_global: f64,
    pub time_budget: Vec<BudgetRow>,
    pub savings: Histogram,
    pub correct_rate: f64,
    pub wrong_rate: f64,
    pub no_decision_rate: f64,
    pub mean_trace_bound: f64,
}

impl SimulationCell {
    pub fn adaptive_total(&self) -> f64 {
        self.adaptive_bandwidth + self.adaptive_time
    }

    pub fn global_total(&self) -> f64 {
        self.global_bandwidth + self.global_time
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationArtifact {
    pub mode: Mode,
    pub n_traces: usize,
    pub cells: Vec<SimulationCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackArtifact {
    pub k: usize,
    #[serde(rename = "L")]
    pub bucket: u32,
    pub report: AttackReport,
    /// Pure-schedule bound of the training sets per configuration.
    pub set_bounds: Vec<f64>,
    pub verdict: Verdict,
}

/// Patterns with members as store indices; pattern ids follow artifact order.
pub fn pattern_list(patterns: &PatternsArtifact, store: &Store) -> Vec<Pattern> {
    patterns
        .patterns
        .iter()
        .map(|e| Pattern {
            pattern_id: e.pattern_id,
            site_id: e.site_id,
            local_index: e.local_index,
            members: e.instances.iter().filter_map(|&i| store.get(e.site_id, i)).collect(),
        })
        .collect()
}

fn grid_index(grid: &[TamarawParams], p: &TamarawParams) -> Option<usize> {
    grid.iter()
        .position(|g| g.rho_out.to_bits() == p.rho_out.to_bits() && g.rho_in.to_bits() == p.rho_in.to_bits())
}

fn fmt_opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

impl Pipeline {
    pub fn sets_hash(&self) -> Result<String> {
        let c = &self.config;
        let params = serde_json::json!({
            "ks": c.ks, "ls": c.ls, "global": c.global, "factor": c.grid_factor, "steps": c.grid_steps,
            "website_diagnostic": c.website_diagnostic,
        });
        Ok(stage_hash("sets", &params, &[&self.patterns_hash()?]))
    }

    pub fn sets(&self) -> Result<String> {
        let views = self.views()?;
        let patterns = self.load_patterns()?;
        let store = &views.train;
        let list = pattern_list(&patterns, store);
        let mut configs = Vec::new();
        for &bucket in &self.config.ls {
            let grid = self.grid(bucket)?;
            let cache = LengthCache::build(&list, &store.traces, &grid);
            let table = OverheadTable::build(&store.traces, &grid);
            let global = self.config.global.with_bucket(bucket);
            for &k in &self.config.ks {
                if list.len() < k {
                    configs.push(SetsConfig {
                        k,
                        bucket,
                        skipped: Some(format!("{} patterns cannot fill sets of {k}", list.len())),
                        sets: Vec::new(),
                        purity: None,
                    });
                    continue;
                }
                let built = build_sets(&cache, k)?;
                let mut entries = Vec::with_capacity(built.len());
                let mut set_sites = Vec::with_capacity(built.len());
                for s in &built {
                    let mut traces: Vec<usize> = s
                        .pattern_ids
                        .iter()
                        .flat_map(|&p| list[p as usize].members.iter().copied())
                        .collect();
                    traces.sort_unstable();
                    let refs: Vec<&Trace> = traces.iter().map(|&i| &store.traces[i]).collect();
                    let owned: Vec<Trace> = refs.iter().map(|t| (*t).clone()).collect();
                    let base = mean_overhead(&owned, &global);
                    let local = table
                        .select_local(&traces, (base.bandwidth, base.time))
                        .map(|g| grid[g]);
                    let sites: Vec<u32> = refs.iter().map(|t| t.site_id).collect();
                    let distinct: BTreeSet<u32> = sites.iter().copied().collect();
                    let p = purity(std::slice::from_ref(&sites), k)?;
                    entries.push(SetEntry {
                        set_id: s.set_id,
                        members: s
                            .pattern_ids
                            .iter()
                            .map(|&p| (list[p as usize].site_id, list[p as usize].local_index))
                            .collect(),
                        pattern_ids: s.pattern_ids.clone(),
                        local_params: local,
                        metrics: SetMetrics {
                            purity: p.per_set[0],
                            distinct_sites: distinct.len(),
                            n_traces: traces.len(),
                            n_patterns: s.pattern_ids.len(),
                            global_accuracy: set_bound_traces(&refs, &global),
                        },
                    });
                    set_sites.push(sites);
                }
                configs.push(SetsConfig {
                    k,
                    bucket,
                    skipped: None,
                    sets: entries,
                    purity: Some(purity(&set_sites, k)?),
                });
            }
        }
        let website = if self.config.website_diagnostic {
            Some(self.website_diagnostic(store)?)
        } else {
            None
        };
        let mut csv = String::from("k,L,set_id,purity,distinct_sites,n_traces,n_patterns,local_rho_out,local_rho_in\n");
        for c in &configs {
            for s in &c.sets {
                let _ = writeln!(
                    csv,
                    "{},{},{},{:.4},{},{},{},{},{}",
                    c.k,
                    c.bucket,
                    s.set_id,
                    s.metrics.purity,
                    s.metrics.distinct_sites,
                    s.metrics.n_traces,
                    s.metrics.n_patterns,
                    fmt_opt(s.local_params.map(|p| p.rho_out)),
                    fmt_opt(s.local_params.map(|p| p.rho_in)),
                );
            }
        }
        let artifact = SetsArtifact { configs, website };
        self.ws.write_artifact(SETS, "sets", &self.sets_hash()?, &artifact)?;
        self.ws.write_text("purity.csv", &csv)?;
        let built = artifact.configs.iter().filter(|c| c.skipped.is_none()).count();
        Ok(format!("built anonymity sets for {built} (k, L) configurations"))
    }

    fn website_diagnostic(&self, store: &Store) -> Result<WebsiteDiagnostic> {
        let mut by_site: BTreeMap<u32, Vec<Vec<f64>>> = BTreeMap::new();
        for t in &store.traces {
            let tam = compute_tam(t, self.config.slot_width, self.config.n_slots)?;
            by_site.entry(t.site_id).or_default().push(tam.flatten());
        }
        let sites: Vec<u32> = by_site.keys().copied().collect();
        let element_tams: Vec<Vec<Vec<f64>>> = by_site.into_values().collect();
        let elements: Vec<Vec<f64>> = element_tams.iter().map(|r| crate::anonymity::super_matrix(r)).collect();
        let groups = super_matrix_sets(&elements, self.config.k);
        Ok(WebsiteDiagnostic {
            k: self.config.k,
            bandwidth_proxy: super_matrix_overhead(&groups, &element_tams),
            groups: groups.iter().map(|g| g.iter().map(|&i| sites[i]).collect()).collect(),
        })
    }

    pub fn load_sets(&self) -> Result<SetsArtifact> {
        self.ws.read_artifact(SETS, &self.sets_hash()?)
    }

    /// `(k, L)` pairs evaluated by the adaptive defense.
    pub fn evaluated_configs(&self) -> Vec<(usize, u32)> {
        let mut ks: BTreeSet<usize> = self.config.table_ks.iter().copied().collect();
        ks.insert(self.config.k);
        ks.iter()
            .flat_map(|&k| self.config.ls.iter().map(move |&l| (k, l)))
            .collect()
    }

    pub fn safetimes_hash(&self) -> Result<String> {
        let c = &self.config;
        let params = serde_json::json!({
            "alpha": c.alpha, "step": c.checkpoint_step, "max": c.checkpoint_max,
            "detector": c.detector_config(), "configs": self.evaluated_configs(),
            "external": c.external_predictor, "slot_width": c.slot_width, "n_slots": c.n_slots,
        });
        Ok(stage_hash("safetimes", &params, &[&self.sets_hash()?]))
    }

    fn site_predictor(&self, bundle: &DetectorBundle) -> Result<Box<dyn SitePredictor>> {
        match self.config.external_predictor.split_first() {
            Some((program, args)) => Ok(Box::new(ExternalPredictor::spawn(program, args)?)),
            None => Ok(Box::new(bundle.site.clone())),
        }
    }

    /// Pattern label of every training trace, per site.
    fn training_labels<'a>(
        &self,
        patterns: &PatternsArtifact,
        store: &'a Store,
    ) -> BTreeMap<u32, (Vec<&'a Trace>, Vec<u32>)> {
        let mut by_site: BTreeMap<u32, (Vec<&Trace>, Vec<u32>)> = BTreeMap::new();
        for e in &patterns.patterns {
            for &i in &e.instances {
                if let Some(idx) = store.get(e.site_id, i) {
                    let entry = by_site.entry(e.site_id).or_default();
                    entry.0.push(&store.traces[idx]);
                    entry.1.push(e.local_index);
                }
            }
        }
        by_site
    }

    pub fn safetimes(&self) -> Result<String> {
        let views = self.views()?;
        let patterns = self.load_patterns()?;
        let sets = self.load_sets()?;
        let checkpoints = self.config.checkpoints();
        let labels = self.training_labels(&patterns, &views.train);
        let centroids: Vec<PatternCentroids> = labels
            .iter()
            .map(|(&site, (traces, l))| {
                let n = patterns
                    .sites
                    .iter()
                    .find(|s| s.site_id == site)
                    .map_or(1, |s| s.clusters.len());
                PatternCentroids::build(site, traces, l, n, self.config.slot_width, self.config.n_slots)
            })
            .collect::<Result<_>>()?;
        let site = CentroidPredictor::train(
            &views.train.refs(),
            &checkpoints,
            self.config.slot_width,
            self.config.n_slots,
        )?;
        let mut models = PatternModels::train(&labels, &checkpoints, &self.config.detector_config())?;
        let bundle = DetectorBundle {
            site,
            patterns: models.clone(),
        };
        let predictor = self.site_predictor(&bundle)?;

        let truth: Vec<(u32, u32)> = views
            .validation
            .par_iter()
            .map(|t| {
                let c = centroids
                    .iter()
                    .find(|c| c.site_id == t.site_id)
                    .ok_or_else(|| Error::InsufficientData(format!("site {} has no patterns", t.site_id)))?;
                Ok((t.site_id, c.nearest(t, self.config.slot_width, self.config.n_slots)?))
            })
            .collect::<Result<_>>()?;
        let grid = Checkpoint::grid(&checkpoints);
        let routes: Vec<Vec<Option<(u32, u32)>>> = views
            .validation
            .par_iter()
            .map(|t| {
                grid.iter()
                    .map(|&cp| route(predictor.as_ref(), &models, t, cp))
                    .collect()
            })
            .collect::<Result<_>>()?;
        let site_accuracy: Vec<f64> = (0..grid.len())
            .map(|c| {
                let hits = routes
                    .iter()
                    .zip(&views.validation)
                    .filter(|(r, t)| r[c].is_some_and(|(s, _)| s == t.site_id))
                    .count();
                hits as f64 / views.validation.len().max(1) as f64
            })
            .collect();

        let mut configs = Vec::new();
        let mut keep: BTreeSet<usize> = BTreeSet::new();
        for (k, bucket) in self.evaluated_configs() {
            let Some(sc) = sets.get(k, bucket).filter(|c| c.skipped.is_none()) else {
                continue;
            };
            let index = sc.set_index();
            let truth_sets: Vec<u32> = truth.iter().map(|key| index[key]).collect();
            let routed: Vec<Vec<Option<u32>>> = routes
                .iter()
                .map(|r| r.iter().map(|x| x.and_then(|key| index.get(&key).copied())).collect())
                .collect();
            let table = compute_safe_times(&truth_sets, &routed, sc.sets.len(), &checkpoints, self.config.alpha)?;
            keep.extend(table.safe_indices());
            configs.push(SafeTimeConfig { k, bucket, table });
        }
        models.retain(&keep);
        let fallback_sites = models
            .sites
            .iter()
            .filter(|s| s.fallback.is_some())
            .map(|s| s.site_id)
            .collect();
        let artifact_models = DetectorArtifact {
            bundle: DetectorBundle {
                site: bundle.site,
                patterns: models,
            },
            centroids,
        };
        let hash = self.safetimes_hash()?;
        std::fs::create_dir_all(self.ws.path("models")).map_err(|e| Error::io(self.ws.path("models"), e))?;
        let digest = container::write(
            &self.ws.path(DETECTOR),
            &artifact_models,
            serde_json::json!({ "config_hash": hash, "retained_checkpoints": keep.iter().map(|&i| checkpoints[i]).collect::<Vec<_>>() }),
        )?;
        let mut csv = String::from("k,L,set_id,tau,a_full,n_validation,flag\n");
        for c in &configs {
            for e in &c.table.entries {
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{:.4},{},{}",
                    c.k,
                    c.bucket,
                    e.set_id,
                    fmt_opt(e.tau),
                    e.a_full,
                    e.n_validation,
                    e.flag.clone().unwrap_or_default()
                );
            }
        }
        let artifact = SafeTimesArtifact {
            retained: keep.iter().map(|&i| checkpoints[i]).collect(),
            checkpoints,
            detector_sha256: digest,
            site_accuracy,
            fallback_sites,
            configs,
        };
        self.ws.write_artifact(SAFETIMES, "safetimes", &hash, &artifact)?;
        self.ws.write_text("safetimes.csv", &csv)?;
        Ok(format!(
            "safe times for {} configurations, {} checkpoints retained",
            artifact.configs.len(),
            artifact.retained.len()
        ))
    }

    pub fn load_safetimes(&self) -> Result<(SafeTimesArtifact, DetectorArtifact)> {
        let st: SafeTimesArtifact = self.ws.read_artifact(SAFETIMES, &self.safetimes_hash()?)?;
        let (det, digest): (DetectorArtifact, String) = container::read_with_digest(&self.ws.path(DETECTOR))?;
        if digest != st.detector_sha256 {
            return Err(Error::ConfigMismatch {
                path: self.ws.path(DETECTOR),
                found: digest,
                expected: st.detector_sha256,
            });
        }
        Ok((st, det))
    }

    /// Adaptive configuration for one global parameter pair: every set gets
    /// the best grid pair strictly dominating the global on its training traces.
    fn adaptive_config(&self, table: &OverheadTable, set_traces: &[Vec<usize>], global_idx: usize) -> AdaptiveConfig {
        let local = set_traces
            .iter()
            .map(|idx| {
                table
                    .select_local(idx, table.mean(global_idx, idx))
                    .map(|g| table.grid[g])
            })
            .collect();
        AdaptiveConfig {
            global: table.grid[global_idx],
            local,
        }
    }

    pub fn simulate_hash(&self) -> Result<String> {
        let c = &self.config;
        let params = serde_json::json!({
            "bin": c.savings_bin_width, "ceilings": c.time_ceilings, "mode": c.mode,
        });
        Ok(stage_hash(
            "simulate",
            &params,
            &[&self.pareto_hash()?, &self.safetimes_hash()?],
        ))
    }

    pub fn simulate(&self) -> Result<String> {
        let views = self.views()?;
        let pareto = self.load_pareto()?;
        let patterns = self.load_patterns()?;
        let sets = self.load_sets()?;
        let (st, det) = self.load_safetimes()?;
        let predictor = self.site_predictor(&det.bundle)?;
        let store = &views.train;
        let eval_refs: Vec<&Trace> = views.eval.iter().collect();
        let truth_pattern: HashMap<(u32, u32), u32> = if self.config.mode == Mode::InTraining {
            views
                .eval
                .par_iter()
                .filter_map(|t| {
                    let c = det.centroids.iter().find(|c| c.site_id == t.site_id)?;
                    Some(
                        c.nearest(t, self.config.slot_width, self.config.n_slots)
                            .map(|p| ((t.site_id, t.instance_id), p)),
                    )
                })
                .collect::<Result<_>>()?
        } else {
            HashMap::new()
        };

        let mut tables: BTreeMap<u32, OverheadTable> = BTreeMap::new();
        let mut cells = Vec::new();
        let mut rows_csv = String::from(
            "k,L,config,rho_out,rho_in,site,instance,bandwidth,time,switched,set_id,switch_time,global_bandwidth,global_time,true_set,outcome\n",
        );
        let mut events_csv = String::from("k,L,config,site,instance,time,routed,accepted\n");
        for sc in &st.configs {
            let Some(set_cfg) = sets.get(sc.k, sc.bucket) else {
                continue;
            };
            let grid = self.grid(sc.bucket)?;
            let table = tables
                .entry(sc.bucket)
                .or_insert_with(|| OverheadTable::build(&store.traces, &grid));
            let set_traces = set_cfg.trace_indices(&patterns, store);
            let index = set_cfg.set_index();
            let detector = TwoStageDetector {
                site: predictor.as_ref(),
                patterns: &det.bundle.patterns,
                sets: &index,
                table: &sc.table,
            };
            let truth = |t: &Trace| -> Option<u32> {
                truth_pattern
                    .get(&(t.site_id, t.instance_id))
                    .and_then(|&p| index.get(&(t.site_id, p)).copied())
            };
            let mut per_param = Vec::new();
            let mut all_rows = Vec::new();
            for (ci, point) in pareto.pareto.iter().enumerate() {
                let g = grid_index(&grid, &point.params)
                    .ok_or_else(|| Error::InvalidArgument("Pareto point is not on the grid".into()))?;
                let config = self.adaptive_config(table, &set_traces, g);
                let report = evaluate(&eval_refs, &config, &detector, &truth)?;
                let set_refs: Vec<Vec<&Trace>> = set_traces
                    .iter()
                    .map(|idx| idx.iter().map(|&i| &store.traces[i]).collect())
                    .collect();
                let set_bounds: Vec<f64> = set_refs
                    .iter()
                    .zip(&config.local)
                    .map(|(refs, local)| set_bound_traces(refs, &local.unwrap_or(config.global)))
                    .collect();
                let fallback = attacker_accuracy_traces(&store.traces, &config.global);
                let single_shot = report.rows.iter().zip(&report.events).all(|(r, ev)| {
                    let accepted = ev.iter().filter(|e| e.accepted.is_some()).count();
                    accepted <= 1
                        && match (r.set_id, r.switch_time) {
                            (Some(s), Some(t)) => sc.table.tau(s) == Some(t),
                            (None, None) => true,
                            _ => false,
                        }
                });
                for (r, ev) in report.rows.iter().zip(&report.events) {
                    let _ = writeln!(
                        rows_csv,
                        "{},{},{ci},{},{},{},{},{:.6},{:.6},{},{},{},{:.6},{:.6},{},{}",
                        sc.k,
                        sc.bucket,
                        config.global.rho_out,
                        config.global.rho_in,
                        r.site_id,
                        r.instance_id,
                        r.bandwidth,
                        r.time,
                        r.switched,
                        fmt_opt(r.set_id),
                        fmt_opt(r.switch_time),
                        r.global_bandwidth,
                        r.global_time,
                        fmt_opt(r.true_set),
                        serde_json::to_value(r.outcome)?.as_str().unwrap_or_default(),
                    );
                    for e in ev {
                        let _ = writeln!(
                            events_csv,
                            "{},{},{ci},{},{},{},{},{}",
                            sc.k,
                            sc.bucket,
                            r.site_id,
                            r.instance_id,
                            e.time,
                            fmt_opt(e.routed),
                            fmt_opt(e.accepted)
                        );
                    }
                }
                per_param.push(ParamSummary {
                    params: config.global,
                    trace_bound: trace_averaged_bound(&report.rows, &set_bounds, fallback),
                    sets_with_local: config.local.iter().filter(|l| l.is_some()).count(),
                    aggregate: report.aggregate,
                    single_shot,
                });
                all_rows.extend(report.rows);
            }
            cells.push(self.summarize_cell(sc.k, sc.bucket, per_param, &all_rows));
        }
        let artifact = SimulationArtifact {
            mode: self.config.mode,
            n_traces: views.eval.len(),
            cells,
        };
        self.ws
            .write_artifact(SIMULATE, "simulate", &self.simulate_hash()?, &artifact)?;
        self.ws.write_text("simulate.csv", &rows_csv)?;
        self.ws.write_text("events.csv", &events_csv)?;
        let primary = artifact
            .cells
            .iter()
            .find(|c| c.k == self.config.k && c.bucket == self.config.global.bucket);
        Ok(match primary {
            Some(c) => format!(
                "simulated {} traces; k={} L={}: adaptive {:.3} vs global {:.3} mean total overhead",
                artifact.n_traces,
                c.k,
                c.bucket,
                c.adaptive_total(),
                c.global_total()
            ),
            None => format!("simulated {} traces", artifact.n_traces),
        })
    }

    fn summarize_cell(
        &self,
        k: usize,
        bucket: u32,
        per_param: Vec<ParamSummary>,
        rows: &[crate::adaptive::TraceRow],
    ) -> SimulationCell {
        let n = per_param.len().max(1) as f64;
        let mean = |f: &dyn Fn(&ParamSummary) -> f64| per_param.iter().map(f).sum::<f64>() / n;
        let adaptive_points: Vec<(f64, f64)> = per_param
            .iter()
            .map(|p| (p.aggregate.mean_time, p.aggregate.mean_bandwidth))
            .collect();
        let global_points: Vec<(f64, f64)> = per_param
            .iter()
            .map(|p| (p.aggregate.global_mean_time, p.aggregate.global_mean_bandwidth))
            .collect();
        let a = time_budget(&adaptive_points, &self.config.time_ceilings);
        let g = time_budget(&global_points, &self.config.time_ceilings);
        let savings: Vec<f64> = rows.iter().map(|r| r.bandwidth_savings()).collect();
        SimulationCell {
            k,
            bucket,
            adaptive_bandwidth: mean(&|p| p.aggregate.mean_bandwidth),
            adaptive_time: mean(&|p| p.aggregate.mean_time),
            global_bandwidth: mean(&|p| p.aggregate.global_mean_bandwidth),
            global_time: mean(&|p| p.aggregate.global_mean_time),
            auc_adaptive: area_under_front(&adaptive_points),
            auc_global: area_under_front(&global_points),
            time_budget: a
                .iter()
                .zip(&g)
                .map(|(x, y)| BudgetRow {
                    ceiling: x.0,
                    adaptive: x.1,
                    global: y.1,
                })
                .collect(),
            savings: histogram(&savings, self.config.savings_bin_width),
            correct_rate: mean(&|p| p.aggregate.correct_rate),
            wrong_rate: mean(&|p| p.aggregate.wrong_rate),
            no_decision_rate: mean(&|p| p.aggregate.no_decision_rate),
            mean_trace_bound: mean(&|p| p.trace_bound),
            per_param,
        }
    }

    pub fn load_simulation(&self) -> Result<SimulationArtifact> {
        self.ws.read_artifact(SIMULATE, &self.simulate_hash()?)
    }

    pub fn bounds_hash(&self) -> Result<String> {
        let params = serde_json::json!({ "weighting": self.config.weighting });
        Ok(stage_hash(
            "bounds",
            &params,
            &[&self.sets_hash()?, &self.pareto_hash()?],
        ))
    }

    pub fn bounds(&self) -> Result<String> {
        let views = self.views()?;
        let pareto = self.load_pareto()?;
        let patterns = self.load_patterns()?;
        let sets = self.load_sets()?;
        let inputs: Vec<SweepInput> = sets
            .configs
            .iter()
            .filter(|c| c.skipped.is_none())
            .map(|c| SweepInput {
                k: c.k,
                bucket: c.bucket,
                sets: c.trace_indices(&patterns, &views.train),
            })
            .collect();
        let params: Vec<TamarawParams> = pareto.pareto.iter().map(|p| p.params).collect();
        let report = bound_sweep(&inputs, &views.train.traces, &params, self.config.weighting)?;
        self.ws
            .write_artifact(BOUNDS, "bounds", &self.bounds_hash()?, &report)?;
        self.ws.write_text("bounds.csv", &report.to_csv())?;
        Ok(format!(
            "bounds for {} (k, L) cells over {} Pareto pairs",
            report.cells.len(),
            params.len()
        ))
    }

    pub fn load_bounds(&self) -> Result<BoundReport> {
        self.ws.read_artifact(BOUNDS, &self.bounds_hash()?)
    }

    pub fn attack_hash(&self) -> Result<String> {
        let c = &self.config;
        let params = serde_json::json!({
            "k": c.k, "L": c.global.bucket, "tolerance": c.attack_tolerance,
            "detector": c.detector_config(), "weighting": c.weighting,
        });
        Ok(stage_hash(
            "attack",
            &params,
            &[&self.pareto_hash()?, &self.safetimes_hash()?],
        ))
    }

    /// Attacks adaptively defended traces under every Pareto pair; fails with
    /// a violation when an accuracy exceeds its bound.
    pub fn attack(&self) -> Result<String> {
        let views = self.views()?;
        let pareto = self.load_pareto()?;
        let patterns = self.load_patterns()?;
        let sets = self.load_sets()?;
        let (st, det) = self.load_safetimes()?;
        let (k, bucket) = (self.config.k, self.config.global.bucket);
        let set_cfg = sets
            .get(k, bucket)
            .filter(|c| c.skipped.is_none())
            .ok_or_else(|| Error::InsufficientData(format!("no anonymity sets for k={k}, L={bucket}")))?;
        let sc = st
            .configs
            .iter()
            .find(|c| c.k == k && c.bucket == bucket)
            .ok_or_else(|| Error::InsufficientData(format!("no safe times for k={k}, L={bucket}")))?;
        let predictor = self.site_predictor(&det.bundle)?;
        let store = &views.train;
        let grid = self.grid(bucket)?;
        let table = OverheadTable::build(&store.traces, &grid);
        let set_traces = set_cfg.trace_indices(&patterns, store);
        let index = set_cfg.set_index();
        let detector = TwoStageDetector {
            site: predictor.as_ref(),
            patterns: &det.bundle.patterns,
            sets: &index,
            table: &sc.table,
        };
        let detector_config = self.config.detector_config();
        let mut rows = Vec::new();
        let mut set_bounds = Vec::new();
        for point in &pareto.pareto {
            let g = grid_index(&grid, &point.params)
                .ok_or_else(|| Error::InvalidArgument("Pareto point is not on the grid".into()))?;
            let config = self.adaptive_config(&table, &set_traces, g);
            let run = |traces: &[Trace]| -> Result<Vec<crate::tamaraw::DefendedTrace>> {
                traces
                    .par_iter()
                    .map(|t| simulate_trace(t, &config, &detector).map(|s| s.defended))
                    .collect()
            };
            let train_def = run(&views.attack_train)?;
            let test_def = run(&views.attack_test)?;
            let observed = |src: &[Trace], d: &[crate::tamaraw::DefendedTrace]| -> Vec<Trace> {
                src.iter()
                    .zip(d)
                    .map(|(t, d)| d.to_observed_trace(t.site_id, t.instance_id))
                    .collect()
            };
            let outcome = closed_world_attack(
                &observed(&views.attack_train, &train_def),
                &observed(&views.attack_test, &test_def),
                &detector_config,
            )?;
            // Bound on the test traces: partition by switch target, bucket by shape.
            let mut groups: BTreeMap<Option<u32>, Vec<(u32, ShapeKey)>> = BTreeMap::new();
            for (t, d) in views.attack_test.iter().zip(&test_def) {
                groups
                    .entry(d.switch_event.map(|e| e.set_id))
                    .or_default()
                    .push((t.site_id, d.shape_key()));
            }
            let groups: Vec<Vec<(u32, ShapeKey)>> = groups.into_values().collect();
            let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
            let bound = global_bound(&groups, &set_weights(&sizes, crate::bound::Weighting::Proportional))?;
            let labeled: Vec<(u32, &crate::tamaraw::DefendedTrace)> = views
                .attack_test
                .iter()
                .zip(&test_def)
                .map(|(t, d)| (t.site_id, d))
                .collect();
            let set_refs: Vec<Vec<&Trace>> = set_traces
                .iter()
                .map(|idx| idx.iter().map(|&i| &store.traces[i]).collect())
                .collect();
            set_bounds.push(global_bound_traces(&set_refs, &config.global, self.config.weighting)?.value);
            rows.push(AttackRow {
                params: config.global,
                bound: bound.value,
                kfp_accuracy: outcome.accuracy,
                oracle_accuracy: bucket_oracle_accuracy(&labeled),
                confusion: outcome.confusion,
            });
        }
        let report = AttackReport { rows };
        let verdict = compare_with_bound(&report, self.config.attack_tolerance);
        let artifact = AttackArtifact {
            k,
            bucket,
            report,
            set_bounds,
            verdict,
        };
        self.ws
            .write_artifact(ATTACK, "attack", &self.attack_hash()?, &artifact)?;
        self.ws.write_text("attack.csv", &artifact.report.to_csv())?;
        if !artifact.verdict.passed {
            let v = &artifact.verdict.violations[0];
            return Err(Error::Violation(format!(
                "{} configuration(s) exceed the bound, e.g. rho_out={} rho_in={}: kFP {:.4}, oracle {:.4}, bound {:.4}",
                artifact.verdict.violations.len(),
                v.params.rho_out,
                v.params.rho_in,
                v.kfp_accuracy,
                v.oracle_accuracy,
                v.bound
            )));
        }
        let mean_kfp =
            artifact.report.rows.iter().map(|r| r.kfp_accuracy).sum::<f64>() / artifact.report.rows.len().max(1) as f64;
        let mean_bound =
            artifact.report.rows.iter().map(|r| r.bound).sum::<f64>() / artifact.report.rows.len().max(1) as f64;
        Ok(format!(
            "kFP accuracy {mean_kfp:.3} vs bound {mean_bound:.3} (mean over {} pairs); all within tolerance",
            artifact.report.rows.len()
        ))
    }

    pub fn load_attack(&self) -> Result<AttackArtifact> {
        self.ws.read_artifact(ATTACK, &self.attack_hash()?)
    }
}
