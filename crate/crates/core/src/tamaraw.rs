//! Constant-rate padding schedule (Tamaraw), overhead metrics, the
//! log-spaced parameter grid, and Pareto filtering.
//!
//! Each direction emits one cell every `rho` seconds starting at `rho`.
//! The i-th real packet of a direction occupies cell
//! `s_i = max(ceil(t_i / rho), s_{i-1} + 1)`; every other cell is a dummy.
//! A direction stops once its cell count reaches a multiple of `L` and it
//! has no real packet left. A direction without real packets still emits
//! one bucket of `L` dummies.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{Direction, Trace, TIME_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TamarawParams {
    pub rho_out: f64,
    pub rho_in: f64,
    #[serde(rename = "L")]
    pub bucket: u32,
}

impl TamarawParams {
    pub fn new(rho_out: f64, rho_in: f64, bucket: u32) -> Result<Self> {
        let p = TamarawParams {
            rho_out,
            rho_in,
            bucket,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho_out > 0.0 && self.rho_out.is_finite())
            || !(self.rho_in > 0.0 && self.rho_in.is_finite())
            || self.bucket == 0
        {
            return Err(Error::InvalidArgument(format!("invalid Tamaraw parameters {self:?}")));
        }
        Ok(())
    }

    pub fn rho(&self, direction: Direction) -> f64 {
        match direction {
            Direction::Out => self.rho_out,
            Direction::In => self.rho_in,
        }
    }

    pub fn with_bucket(self, bucket: u32) -> Self {
        TamarawParams { bucket, ..self }
    }

    /// Bit-level identity, usable as a hash key.
    pub fn key(&self) -> (u64, u64, u32) {
        (self.rho_out.to_bits(), self.rho_in.to_bits(), self.bucket)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub time: f64,
    pub direction: Direction,
    pub is_dummy: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwitchEvent {
    pub time: f64,
    pub set_id: u32,
}

/// Everything about a defended trace's schedule an observer could tell apart:
/// the set switched to, the per-direction cell counts emitted before the
/// switch, and the final per-direction counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ShapeKey {
    pub set_id: Option<u32>,
    pub phase1: Option<(u32, u32)>,
    pub n_out: u32,
    pub n_in: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefendedTrace {
    pub cells: Vec<Cell>,
    pub last_real_time: f64,
    pub switch_event: Option<SwitchEvent>,
    pub n_out: u32,
    pub n_in: u32,
    /// Cells per direction (out, in) emitted under the global phase before a switch.
    pub phase1: Option<(u32, u32)>,
}

impl DefendedTrace {
    pub fn total_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn real_cells(&self) -> usize {
        self.cells.iter().filter(|c| !c.is_dummy).count()
    }

    pub fn shape_key(&self) -> ShapeKey {
        ShapeKey {
            set_id: self.switch_event.map(|e| e.set_id),
            phase1: self.phase1,
            n_out: self.n_out,
            n_in: self.n_in,
        }
    }

    /// The observable sequence: cell times and directions, dummy flags removed.
    pub fn observable(&self) -> Vec<(u64, Direction)> {
        self.cells.iter().map(|c| (c.time.to_bits(), c.direction)).collect()
    }

    /// The defended cells as a plain trace, as an on-path observer records it.
    pub fn to_observed_trace(&self, site_id: u32, instance_id: u32) -> Trace {
        Trace::new(
            self.cells
                .iter()
                .map(|c| crate::trace::Packet::new(c.time, c.direction))
                .collect(),
            site_id,
            instance_id,
        )
    }
}

/// Smallest `j >= 1` with `origin + j * rho >= t` (within [`TIME_EPS`]).
pub(crate) fn first_slot_at_or_after(t: f64, origin: f64, rho: f64) -> u64 {
    let offset = t - origin;
    if offset <= TIME_EPS {
        return 1;
    }
    let mut j = (offset / rho).ceil();
    if j > 1.0 && (j - 1.0) * rho >= offset - TIME_EPS {
        j -= 1.0;
    }
    (j as u64).max(1)
}

/// Cell indices (1-based) of each real packet in one direction.
pub(crate) fn real_slots(times: impl Iterator<Item = f64>, rho: f64) -> Vec<u64> {
    let mut prev = 0u64;
    times
        .map(|t| {
            let s = first_slot_at_or_after(t, 0.0, rho).max(prev + 1);
            prev = s;
            s
        })
        .collect()
}

/// Rounds a cell count up to the bucket size; zero counts become one bucket.
pub(crate) fn padded_count(count: u64, bucket: u32) -> u64 {
    let l = bucket as u64;
    if count == 0 {
        l
    } else {
        count.div_ceil(l) * l
    }
}

/// Summary of a pure schedule without materializing cells.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleSummary {
    pub n_out: u32,
    pub n_in: u32,
    pub last_real_time: f64,
}

fn last_slot(times: impl Iterator<Item = f64>, rho: f64) -> u64 {
    let mut prev = 0u64;
    for t in times {
        prev = first_slot_at_or_after(t, 0.0, rho).max(prev + 1);
    }
    prev
}

pub fn schedule_summary(trace: &Trace, params: &TamarawParams) -> ScheduleSummary {
    let s_out = last_slot(trace.times(Direction::Out), params.rho_out);
    let s_in = last_slot(trace.times(Direction::In), params.rho_in);
    ScheduleSummary {
        n_out: padded_count(s_out, params.bucket) as u32,
        n_in: padded_count(s_in, params.bucket) as u32,
        last_real_time: (s_out as f64 * params.rho_out).max(s_in as f64 * params.rho_in),
    }
}

/// Per-direction defended cell counts `(n_out, n_in)`.
pub fn defended_lengths(trace: &Trace, params: &TamarawParams) -> (u32, u32) {
    let s = schedule_summary(trace, params);
    (s.n_out, s.n_in)
}

/// Materializes one direction's cells: `(time, is_dummy)`.
pub(crate) fn direction_cells(slots: &[u64], total: u64, rho: f64) -> Vec<(f64, bool)> {
    let mut cells = Vec::with_capacity(total as usize);
    let mut next_real = slots.iter().peekable();
    for j in 1..=total {
        let is_real = next_real.peek().is_some_and(|&&s| s == j);
        if is_real {
            next_real.next();
        }
        cells.push((j as f64 * rho, !is_real));
    }
    cells
}

/// Merges both directions by time, outgoing first on ties.
pub(crate) fn merge_cells(out: Vec<(f64, bool)>, inc: Vec<(f64, bool)>) -> Vec<Cell> {
    let mut cells = Vec::with_capacity(out.len() + inc.len());
    let (mut i, mut j) = (0, 0);
    while i < out.len() || j < inc.len() {
        let take_out = j >= inc.len() || (i < out.len() && out[i].0 <= inc[j].0);
        if take_out {
            cells.push(Cell {
                time: out[i].0,
                direction: Direction::Out,
                is_dummy: out[i].1,
            });
            i += 1;
        } else {
            cells.push(Cell {
                time: inc[j].0,
                direction: Direction::In,
                is_dummy: inc[j].1,
            });
            j += 1;
        }
    }
    cells
}

/// Applies the constant-rate schedule to a whole trace.
pub fn defend(trace: &Trace, params: &TamarawParams) -> Result<DefendedTrace> {
    if trace.is_empty() {
        return Err(Error::EmptyTrace);
    }
    params.validate()?;
    let out_slots = real_slots(trace.times(Direction::Out), params.rho_out);
    let in_slots = real_slots(trace.times(Direction::In), params.rho_in);
    let s_out = out_slots.last().copied().unwrap_or(0);
    let s_in = in_slots.last().copied().unwrap_or(0);
    let n_out = padded_count(s_out, params.bucket);
    let n_in = padded_count(s_in, params.bucket);
    let cells = merge_cells(
        direction_cells(&out_slots, n_out, params.rho_out),
        direction_cells(&in_slots, n_in, params.rho_in),
    );
    Ok(DefendedTrace {
        cells,
        last_real_time: (s_out as f64 * params.rho_out).max(s_in as f64 * params.rho_in),
        switch_event: None,
        n_out: n_out as u32,
        n_in: n_in as u32,
        phase1: None,
    })
}

/// Bandwidth and time overhead of one defended trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Overhead {
    pub bandwidth: f64,
    pub time: f64,
    /// Set when the original trace ends at time zero; `time` is then reported as 0.
    pub time_degenerate: bool,
}

impl Overhead {
    pub fn total(&self) -> f64 {
        self.bandwidth + self.time
    }

    pub(crate) fn from_counts(n_real: usize, total_cells: usize, last_original: f64, last_defended: f64) -> Overhead {
        let n = n_real as f64;
        let bandwidth = (total_cells as f64 - n) / n;
        let (time, time_degenerate) = if last_original <= 0.0 {
            (0.0, true)
        } else {
            (((last_defended - last_original) / last_original).max(0.0), false)
        };
        Overhead {
            bandwidth,
            time,
            time_degenerate,
        }
    }
}

pub fn overheads(trace: &Trace, defended: &DefendedTrace) -> Result<Overhead> {
    let last = trace.last_time().ok_or(Error::EmptyTrace)?;
    Ok(Overhead::from_counts(
        trace.len(),
        defended.total_cells(),
        last,
        defended.last_real_time,
    ))
}

/// Overheads under a pure schedule, via the fast path.
pub fn fast_overhead(trace: &Trace, params: &TamarawParams) -> Overhead {
    let s = schedule_summary(trace, params);
    Overhead::from_counts(
        trace.len(),
        (s.n_out + s.n_in) as usize,
        trace.last_time().unwrap_or(0.0),
        s.last_real_time,
    )
}

/// Mean overheads of one configuration over a batch of traces.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverheadPoint {
    pub params: TamarawParams,
    pub bandwidth: f64,
    pub time: f64,
}

impl OverheadPoint {
    pub fn total(&self) -> f64 {
        self.bandwidth + self.time
    }
}

pub fn mean_overhead(traces: &[Trace], params: &TamarawParams) -> OverheadPoint {
    let n = traces.len().max(1) as f64;
    let (bw, time) = traces.iter().fold((0.0, 0.0), |(b, t), tr| {
        let o = fast_overhead(tr, params);
        (b + o.bandwidth, t + o.time)
    });
    OverheadPoint {
        params: *params,
        bandwidth: bw / n,
        time: time / n,
    }
}

/// Log-spaced grid around `init`: each rate independently takes `steps`
/// values with consecutive ratio `factor^(1 / floor(steps / 2))`, starting
/// `factor` times below `init`.
pub fn build_param_grid(init: &TamarawParams, factor: f64, steps: usize) -> Result<Vec<TamarawParams>> {
    init.validate()?;
    if steps == 0 || !(factor >= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "grid needs steps >= 1 and factor >= 1 (got {steps}, {factor})"
        )));
    }
    let values = |center: f64| -> Vec<f64> {
        let half = (steps / 2) as i64;
        if half == 0 {
            return vec![center];
        }
        let ratio = (factor.ln() / half as f64).exp();
        (0..steps as i64)
            .map(|i| center * ratio.powi((i - half) as i32))
            .collect()
    };
    let ins = values(init.rho_in);
    let outs = values(init.rho_out);
    let mut grid = Vec::with_capacity(ins.len() * outs.len());
    for &rho_in in &ins {
        for &rho_out in &outs {
            grid.push(TamarawParams {
                rho_out,
                rho_in,
                bucket: init.bucket,
            });
        }
    }
    Ok(grid)
}

/// Keeps the points no other point dominates (<= in both overheads and
/// < in at least one), ordered by ascending time overhead.
pub fn pareto_filter(points: &[OverheadPoint]) -> Vec<OverheadPoint> {
    let mut sorted: Vec<OverheadPoint> = points.to_vec();
    sorted.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.bandwidth.total_cmp(&b.bandwidth)));
    let mut kept = Vec::new();
    let mut best_before = f64::INFINITY;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].time == sorted[i].time {
            j += 1;
        }
        // Within an equal-time group only the minimal-bandwidth points can survive.
        let group_min = sorted[i].bandwidth;
        if group_min < best_before {
            kept.extend(sorted[i..j].iter().filter(|p| p.bandwidth == group_min));
        }
        best_before = best_before.min(group_min);
        i = j;
    }
    kept
}
