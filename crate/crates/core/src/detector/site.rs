//! Stage A: which site is this prefix from?

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Checkpoint;
use crate::error::{Error, Result};
use crate::trace::{tam_of_packets, Trace};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SitePrediction {
    pub site_id: u32,
    pub confidence: f64,
}

pub trait SitePredictor: Send + Sync {
    /// `None` means the predictor abstains.
    fn predict(&self, prefix: &Trace, checkpoint: Checkpoint) -> Result<Option<SitePrediction>>;
}

/// Flattened TAM with trailing zeros removed.
fn sparse_tam(trace: &Trace, slot_width: f64, n_slots: usize) -> (Vec<f64>, Vec<f64>) {
    let tam = tam_of_packets(&trace.packets, slot_width, n_slots).expect("checked slot parameters");
    let trim = |v: &[u32]| -> Vec<f64> {
        let end = v.iter().rposition(|&c| c > 0).map_or(0, |i| i + 1);
        v[..end].iter().map(|&c| c as f64).collect()
    };
    (trim(&tam.out_counts), trim(&tam.in_counts))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().max(b.len());
    (0..n)
        .map(|i| {
            let d = a.get(i).copied().unwrap_or(0.0) - b.get(i).copied().unwrap_or(0.0);
            d * d
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Centroid {
    pub site_id: u32,
    pub out_counts: Vec<f64>,
    pub in_counts: Vec<f64>,
}

/// Nearest-centroid classifier over truncated-prefix TAMs, one centroid per
/// (site, checkpoint).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentroidPredictor {
    pub slot_width: f64,
    pub n_slots: usize,
    pub checkpoints: Vec<f64>,
    /// `centroids[checkpoint index]`, the last entry being the full trace.
    pub centroids: Vec<Vec<Centroid>>,
    /// Abstain when the nearest centroid is farther than this.
    pub rejection_radius: Option<f64>,
}

impl CentroidPredictor {
    pub fn train(traces: &[&Trace], checkpoints: &[f64], slot_width: f64, n_slots: usize) -> Result<Self> {
        if traces.is_empty() {
            return Err(Error::InsufficientData("site predictor needs training traces".into()));
        }
        if !(slot_width > 0.0) || n_slots == 0 {
            return Err(Error::InvalidArgument(
                "slot width and slot count must be positive".into(),
            ));
        }
        let mut by_site: BTreeMap<u32, Vec<&Trace>> = BTreeMap::new();
        for t in traces {
            by_site.entry(t.site_id).or_default().push(t);
        }
        let all: Vec<Checkpoint> = Checkpoint::grid(checkpoints);
        let centroids = all
            .par_iter()
            .map(|cp| {
                by_site
                    .iter()
                    .map(|(&site, ts)| {
                        let mut out: Vec<f64> = Vec::new();
                        let mut inc: Vec<f64> = Vec::new();
                        for t in ts {
                            let (o, i) = sparse_tam(&cp.prefix(t), slot_width, n_slots);
                            accumulate(&mut out, &o);
                            accumulate(&mut inc, &i);
                        }
                        let n = ts.len() as f64;
                        out.iter_mut().chain(inc.iter_mut()).for_each(|v| *v /= n);
                        Centroid {
                            site_id: site,
                            out_counts: out,
                            in_counts: inc,
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(CentroidPredictor {
            slot_width,
            n_slots,
            checkpoints: checkpoints.to_vec(),
            centroids,
            rejection_radius: None,
        })
    }

    fn index(&self, checkpoint: Checkpoint) -> Option<usize> {
        match checkpoint {
            Checkpoint::Full => Some(self.checkpoints.len()),
            Checkpoint::Time(t) => self.checkpoints.iter().position(|&c| c == t),
        }
    }
}

fn accumulate(acc: &mut Vec<f64>, v: &[f64]) {
    if acc.len() < v.len() {
        acc.resize(v.len(), 0.0);
    }
    for (a, x) in acc.iter_mut().zip(v) {
        *a += x;
    }
}

impl SitePredictor for CentroidPredictor {
    fn predict(&self, prefix: &Trace, checkpoint: Checkpoint) -> Result<Option<SitePrediction>> {
        let idx = self
            .index(checkpoint)
            .ok_or_else(|| Error::InvalidArgument(format!("{checkpoint:?} is not a trained checkpoint")))?;
        let (o, i) = sparse_tam(prefix, self.slot_width, self.n_slots);
        let mut best: Option<(f64, u32)> = None;
        let mut total_inv = 0.0;
        let mut dists = Vec::with_capacity(self.centroids[idx].len());
        for c in &self.centroids[idx] {
            let d = (sq_dist(&o, &c.out_counts) + sq_dist(&i, &c.in_counts)).sqrt();
            dists.push(d);
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, c.site_id));
            }
        }
        let Some((d, site_id)) = best else {
            return Ok(None);
        };
        if self.rejection_radius.is_some_and(|r| d > r) {
            return Ok(None);
        }
        for x in &dists {
            total_inv += 1.0 / (1.0 + x);
        }
        Ok(Some(SitePrediction {
            site_id,
            confidence: (1.0 / (1.0 + d)) / total_inv,
        }))
    }
}

#[derive(Serialize)]
struct ExternalRequest {
    /// `null` for the complete trace.
    checkpoint: Option<f64>,
    packets: Vec<(f64, i32)>,
}

#[derive(Deserialize)]
struct ExternalResponse {
    site_id: Option<u32>,
    #[serde(default)]
    confidence: f64,
}

/// Site predictor running in a child process, one JSON object per line each way.
///
/// Request: `{"checkpoint": 2.5, "packets": [[0.0, 1], [0.01, -1]]}` with a
/// `null` checkpoint for complete traces. Response: `{"site_id": 4,
/// "confidence": 0.8}`, or `{"site_id": null}` to abstain.
pub struct ExternalPredictor {
    io: Mutex<(Child, ChildStdin, BufReader<ChildStdout>)>,
}

impl ExternalPredictor {
    pub fn spawn(program: &str, args: &[String]) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::External(format!("cannot start {program}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(ExternalPredictor {
            io: Mutex::new((child, stdin, stdout)),
        })
    }
}

impl SitePredictor for ExternalPredictor {
    fn predict(&self, prefix: &Trace, checkpoint: Checkpoint) -> Result<Option<SitePrediction>> {
        let request = ExternalRequest {
            checkpoint: match checkpoint {
                Checkpoint::Time(t) => Some(t),
                Checkpoint::Full => None,
            },
            packets: prefix.packets.iter().map(|p| (p.time, p.direction.sign())).collect(),
        };
        let mut line = serde_json::to_string(&request)?;
        line.push('\n');
        let mut guard = self
            .io
            .lock()
            .map_err(|_| Error::External("predictor lock poisoned".into()))?;
        let (_, stdin, stdout) = &mut *guard;
        stdin
            .write_all(line.as_bytes())
            .and_then(|_| stdin.flush())
            .map_err(|e| Error::External(format!("write to predictor: {e}")))?;
        let mut reply = String::new();
        let n = stdout
            .read_line(&mut reply)
            .map_err(|e| Error::External(format!("read from predictor: {e}")))?;
        if n == 0 {
            return Err(Error::External("predictor closed its output".into()));
        }
        let r: ExternalResponse =
            serde_json::from_str(reply.trim()).map_err(|e| Error::External(format!("bad predictor reply: {e}")))?;
        Ok(r.site_id.map(|site_id| SitePrediction {
            site_id,
            confidence: r.confidence,
        }))
    }
}

impl Drop for ExternalPredictor {
    fn drop(&mut self) {
        if let Ok(mut g) = self.io.lock() {
            let _ = g.0.kill();
            let _ = g.0.wait();
        }
    }
}
