//! Traces, TAM extraction, and dataset handling.
//!
//! A trace file holds one `time<TAB>direction` pair per line, where time is
//! in seconds and direction is `+1` (outgoing) or `-1` (incoming). Labeled
//! files are named `<site>-<instance>`, unlabeled ones `<instance>`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance for timestamp comparisons, in seconds.
pub const TIME_EPS: f64 = 1e-9;

pub const DEFAULT_SLOT_WIDTH: f64 = 0.080;
pub const DEFAULT_N_SLOTS: usize = 1000;

/// Site label given to traces loaded from unlabeled files.
pub const UNLABELED_SITE: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    Out,
    In,
}

impl Direction {
    pub fn sign(self) -> i32 {
        match self {
            Direction::Out => 1,
            Direction::In => -1,
        }
    }

    pub fn from_sign(sign: i64) -> Option<Self> {
        match sign {
            1 => Some(Direction::Out),
            -1 => Some(Direction::In),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Packet {
    pub time: f64,
    pub direction: Direction,
}

impl Packet {
    pub fn new(time: f64, direction: Direction) -> Self {
        Packet { time, direction }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub packets: Vec<Packet>,
    pub site_id: u32,
    pub instance_id: u32,
}

impl Trace {
    pub fn new(packets: Vec<Packet>, site_id: u32, instance_id: u32) -> Self {
        Trace {
            packets,
            site_id,
            instance_id,
        }
    }

    pub fn len(&self) -> usize {
        self.packets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.packets.is_empty()
    }

    pub fn last_time(&self) -> Option<f64> {
        self.packets.last().map(|p| p.time)
    }

    pub fn count(&self, direction: Direction) -> usize {
        self.packets.iter().filter(|p| p.direction == direction).count()
    }

    /// Packet times of one direction, in order.
    pub fn times(&self, direction: Direction) -> impl Iterator<Item = f64> + '_ {
        self.packets
            .iter()
            .filter(move |p| p.direction == direction)
            .map(|p| p.time)
    }

    /// Serializes to the `time<TAB>direction` text format.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.packets.len() * 16);
        for p in &self.packets {
            // `{}` on f64 prints the shortest representation that parses back exactly.
            let _ = writeln!(out, "{}\t{}", p.time, p.direction.sign());
        }
        out
    }
}

/// Parses one trace in the `time<TAB>direction` format.
pub fn parse_trace(content: &str, site_id: u32, instance_id: u32) -> Result<Trace> {
    let mut packets = Vec::new();
    let mut previous = 0.0_f64;
    for (idx, raw) in content.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let (time_s, dir_s) = match (fields.next(), fields.next(), fields.next()) {
            (Some(t), Some(d), None) => (t.trim(), d.trim()),
            _ => {
                return Err(Error::MalformedLine {
                    line: line_no,
                    reason: "expected `<time>\\t<direction>`".into(),
                })
            }
        };
        let time: f64 = time_s.parse().map_err(|_| Error::MalformedLine {
            line: line_no,
            reason: format!("bad timestamp {time_s:?}"),
        })?;
        if !time.is_finite() || time < 0.0 {
            return Err(Error::MalformedLine {
                line: line_no,
                reason: format!("timestamp {time} must be finite and non-negative"),
            });
        }
        let sign: i64 = dir_s.parse().map_err(|_| Error::MalformedLine {
            line: line_no,
            reason: format!("bad direction {dir_s:?}"),
        })?;
        let direction = Direction::from_sign(sign).ok_or_else(|| Error::MalformedLine {
            line: line_no,
            reason: format!("direction {sign} is not +1 or -1"),
        })?;
        if !packets.is_empty() && time < previous - TIME_EPS {
            return Err(Error::OutOfOrder {
                line: line_no,
                time,
                previous,
            });
        }
        previous = previous.max(time);
        packets.push(Packet { time, direction });
    }
    if packets.is_empty() {
        return Err(Error::EmptyTrace);
    }
    Ok(Trace::new(packets, site_id, instance_id))
}

/// Traffic aggregation matrix: per-slot packet counts in both directions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tam {
    pub out_counts: Vec<u32>,
    pub in_counts: Vec<u32>,
    pub slot_width: f64,
}

impl Tam {
    pub fn n_slots(&self) -> usize {
        self.out_counts.len()
    }

    pub fn total(&self) -> u64 {
        self.out_counts.iter().chain(&self.in_counts).map(|&c| c as u64).sum()
    }

    /// Row-major flattening: outgoing row followed by incoming row.
    pub fn flatten(&self) -> Vec<f64> {
        self.out_counts
            .iter()
            .chain(&self.in_counts)
            .map(|&c| c as f64)
            .collect()
    }
}

/// Slots packets by `floor(time / slot_width)`; packets past the window are dropped.
pub fn compute_tam(trace: &Trace, slot_width: f64, n_slots: usize) -> Result<Tam> {
    if trace.is_empty() {
        return Err(Error::EmptyTrace);
    }
    tam_of_packets(&trace.packets, slot_width, n_slots)
}

/// Like [`compute_tam`] but accepts an empty packet list (yielding all zeros).
pub fn tam_of_packets(packets: &[Packet], slot_width: f64, n_slots: usize) -> Result<Tam> {
    if !(slot_width > 0.0) || n_slots == 0 {
        return Err(Error::InvalidArgument(format!(
            "slot_width {slot_width} and n_slots {n_slots} must be positive"
        )));
    }
    let mut out_counts = vec![0u32; n_slots];
    let mut in_counts = vec![0u32; n_slots];
    for p in packets {
        let slot = (p.time / slot_width).floor();
        if slot < 0.0 || slot >= n_slots as f64 {
            continue;
        }
        let slot = slot as usize;
        match p.direction {
            Direction::Out => out_counts[slot] += 1,
            Direction::In => in_counts[slot] += 1,
        }
    }
    Ok(Tam {
        out_counts,
        in_counts,
        slot_width,
    })
}

/// Keeps the packets with `time <= horizon` (within [`TIME_EPS`]).
pub fn truncate_prefix(trace: &Trace, horizon: f64) -> Trace {
    let end = trace.packets.partition_point(|p| p.time <= horizon + TIME_EPS);
    Trace::new(trace.packets[..end].to_vec(), trace.site_id, trace.instance_id)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// Relative split weights, applied per site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRatio {
    pub train: u32,
    pub validation: u32,
    pub test: u32,
}

impl Default for SplitRatio {
    fn default() -> Self {
        SplitRatio {
            train: 8,
            validation: 1,
            test: 1,
        }
    }
}

impl SplitRatio {
    /// Per-site counts (train, validation, test) for `n` traces.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let total = (self.train + self.validation + self.test).max(1) as usize;
        let validation = n * self.validation as usize / total;
        let test = n * self.test as usize / total;
        (n - validation - test, validation, test)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub traces: Vec<Trace>,
    pub splits: Vec<Split>,
}

impl Dataset {
    /// Sorts traces by (site, instance) and assigns stratified splits.
    pub fn new(mut traces: Vec<Trace>, ratio: SplitRatio, seed: u64) -> Self {
        traces.sort_by_key(|t| (t.site_id, t.instance_id));
        let splits = assign_splits(&traces, ratio, seed);
        Dataset { traces, splits }
    }

    pub fn split(&self, which: Split) -> impl Iterator<Item = &Trace> {
        self.traces
            .iter()
            .zip(&self.splits)
            .filter(move |(_, s)| **s == which)
            .map(|(t, _)| t)
    }

    pub fn split_vec(&self, which: Split) -> Vec<Trace> {
        self.split(which).cloned().collect()
    }

    pub fn sites(&self) -> Vec<u32> {
        let mut sites: Vec<u32> = self.traces.iter().map(|t| t.site_id).collect();
        sites.sort_unstable();
        sites.dedup();
        sites
    }

    /// Keeps only the traces whose site passes `keep`.
    pub fn filter_sites(&self, keep: impl Fn(u32) -> bool) -> Dataset {
        let (traces, splits) = self
            .traces
            .iter()
            .zip(&self.splits)
            .filter(|(t, _)| keep(t.site_id))
            .map(|(t, s)| (t.clone(), *s))
            .unzip();
        Dataset { traces, splits }
    }
}

/// Deterministic per-site stratified split assignment.
pub fn assign_splits(traces: &[Trace], ratio: SplitRatio, seed: u64) -> Vec<Split> {
    let mut by_site: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, t) in traces.iter().enumerate() {
        by_site.entry(t.site_id).or_default().push(i);
    }
    let mut splits = vec![Split::Train; traces.len()];
    for (site, mut idx) in by_site {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (site as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        idx.shuffle(&mut rng);
        let (_, n_val, n_test) = ratio.counts(idx.len());
        for (pos, &i) in idx.iter().enumerate() {
            splits[i] = if pos < n_val {
                Split::Validation
            } else if pos < n_val + n_test {
                Split::Test
            } else {
                Split::Train
            };
        }
    }
    splits
}

/// Parses a trace filename: `<site>-<instance>` or `<instance>`.
pub fn parse_trace_filename(name: &str) -> Option<(u32, u32)> {
    let stem = name.split('.').next().unwrap_or(name);
    match stem.split_once('-') {
        Some((site, inst)) => Some((site.parse().ok()?, inst.parse().ok()?)),
        None => Some((UNLABELED_SITE, stem.parse().ok()?)),
    }
}

pub fn read_trace_file(path: &Path, site_id: u32, instance_id: u32) -> Result<Trace> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trace(&content, site_id, instance_id).map_err(|e| match e {
        Error::MalformedLine { line, reason } => Error::MalformedLine {
            line,
            reason: format!("{}: {reason}", path.display()),
        },
        other => other,
    })
}

/// Loads every trace file in a directory, in parallel, merged by (site, instance).
pub fn load_trace_dir(dir: &Path) -> Result<Vec<Trace>> {
    let mut entries = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if !path.is_file() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some((site, inst)) = parse_trace_filename(&name) {
            entries.push((path, site, inst));
        }
    }
    let mut traces = entries
        .par_iter()
        .map(|(path, site, inst)| read_trace_file(path, *site, *inst))
        .collect::<Result<Vec<_>>>()?;
    traces.sort_by_key(|t| (t.site_id, t.instance_id));
    Ok(traces)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub site: u32,
    pub instance: u32,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub const VERSION: u32 = 1;

    /// Builds a manifest for `dataset` whose files live under `rel_dir`.
    pub fn for_dataset(dataset: &Dataset, rel_dir: &Path) -> Manifest {
        let entries = dataset
            .traces
            .iter()
            .zip(&dataset.splits)
            .map(|(t, s)| ManifestEntry {
                path: rel_dir.join(trace_file_name(t)),
                site: t.site_id,
                instance: t.instance_id,
                split: *s,
            })
            .collect();
        Manifest {
            version: Self::VERSION,
            entries,
        }
    }

    /// Loads the dataset; relative paths resolve against `base`.
    pub fn load(&self, base: &Path) -> Result<Dataset> {
        if self.version != Self::VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported manifest version {}",
                self.version
            )));
        }
        let mut loaded = self
            .entries
            .par_iter()
            .map(|e| {
                let path = if e.path.is_absolute() {
                    e.path.clone()
                } else {
                    base.join(&e.path)
                };
                read_trace_file(&path, e.site, e.instance).map(|t| (t, e.split))
            })
            .collect::<Result<Vec<_>>>()?;
        loaded.sort_by_key(|(t, _)| (t.site_id, t.instance_id));
        let (traces, splits) = loaded.into_iter().unzip();
        Ok(Dataset { traces, splits })
    }
}

pub fn trace_file_name(trace: &Trace) -> String {
    if trace.site_id == UNLABELED_SITE {
        format!("{}", trace.instance_id)
    } else {
        format!("{}-{}", trace.site_id, trace.instance_id)
    }
}

/// Writes all traces as individual files into `dir`.
pub fn write_trace_dir(dir: &Path, traces: &[Trace]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    traces
        .iter()
        .map(|t| {
            let path = dir.join(trace_file_name(t));
            fs::write(&path, t.to_text()).map_err(|e| Error::io(&path, e))?;
            Ok(path)
        })
        .collect()
}
