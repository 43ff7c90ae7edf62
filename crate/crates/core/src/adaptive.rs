//! Global-to-local switching simulator.
//!
//! A trace starts under the global schedule. At each decision time the
//! detector looks at the undefended prefix; when it accepts a set, the client
//! switches once to that set's local rates. Cells already emitted stay, the
//! real packets still queued move to the new schedule in order, and bucket
//! padding applies to each direction's combined cell count.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::safetime::{self, SafeTimeTable};
use crate::detector::site::SitePredictor;
use crate::detector::{route, Checkpoint, PatternModels, SetIndex};
use crate::error::{Error, Result};
use crate::tamaraw::{
    defend, direction_cells, first_slot_at_or_after, merge_cells, overheads, padded_count, real_slots,
    schedule_summary, DefendedTrace, Overhead, SwitchEvent, TamarawParams,
};
use crate::trace::{Direction, Trace, TIME_EPS};

/// Outcome of one detector consultation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    /// The set the prefix was routed to, if any.
    pub routed: Option<u32>,
    /// The set accepted for switching, if any.
    pub accepted: Option<u32>,
}

impl Decision {
    pub const NONE: Decision = Decision {
        routed: None,
        accepted: None,
    };
}

pub trait SwitchDetector: Sync {
    /// Times at which a decision may be taken, ascending.
    fn decision_times(&self) -> Vec<f64>;
    /// Consults the detector on the prefix of the original trace up to `t`.
    fn decide(&self, trace: &Trace, t: f64) -> Result<Decision>;
}

/// Never switches.
pub struct NeverDetector;

impl SwitchDetector for NeverDetector {
    fn decision_times(&self) -> Vec<f64> {
        Vec::new()
    }

    fn decide(&self, _trace: &Trace, _t: f64) -> Result<Decision> {
        Ok(Decision::NONE)
    }
}

/// Knows every trace's true set and accepts it at a fixed time.
pub struct OracleDetector {
    pub assignments: HashMap<(u32, u32), u32>,
    pub time: f64,
}

impl SwitchDetector for OracleDetector {
    fn decision_times(&self) -> Vec<f64> {
        vec![self.time]
    }

    fn decide(&self, trace: &Trace, t: f64) -> Result<Decision> {
        let routed = self.assignments.get(&(trace.site_id, trace.instance_id)).copied();
        Ok(Decision {
            routed,
            accepted: if t == self.time { routed } else { None },
        })
    }
}

/// Site predictor, per-site pattern models, set membership and safe times.
pub struct TwoStageDetector<'a> {
    pub site: &'a dyn SitePredictor,
    pub patterns: &'a PatternModels,
    pub sets: &'a SetIndex,
    pub table: &'a SafeTimeTable,
}

impl SwitchDetector for TwoStageDetector<'_> {
    fn decision_times(&self) -> Vec<f64> {
        self.table.decision_times()
    }

    fn decide(&self, trace: &Trace, t: f64) -> Result<Decision> {
        let routed =
            route(self.site, self.patterns, trace, Checkpoint::Time(t))?.and_then(|key| self.sets.get(&key).copied());
        Ok(Decision {
            routed,
            accepted: safetime::decide(routed, t, self.table),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveConfig {
    pub global: TamarawParams,
    /// Local parameters per set id; `None` marks a set that never switches.
    pub local: Vec<Option<TamarawParams>>,
}

impl AdaptiveConfig {
    pub fn validate(&self) -> Result<()> {
        self.global.validate()?;
        for p in self.local.iter().flatten() {
            p.validate()?;
            if p.bucket != self.global.bucket {
                return Err(Error::InvalidArgument(
                    "local parameters must share the global bucket size".into(),
                ));
            }
        }
        Ok(())
    }

    fn local(&self, set: u32) -> Option<TamarawParams> {
        self.local.get(set as usize).copied().flatten()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecisionEvent {
    pub time: f64,
    pub routed: Option<u32>,
    pub accepted: Option<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Simulated {
    pub defended: DefendedTrace,
    pub events: Vec<DecisionEvent>,
}

/// The defended trace when switching to `local` at time `tau`.
pub fn switch_schedule(
    trace: &Trace,
    global: &TamarawParams,
    local: &TamarawParams,
    tau: f64,
    set_id: u32,
) -> Result<DefendedTrace> {
    if trace.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let bucket = global.bucket;
    let pure = schedule_summary(trace, global);
    let mut phase1 = [0u32; 2];
    let mut totals = [0u32; 2];
    let mut last_real = 0.0f64;
    let mut per_dir = Vec::with_capacity(2);
    for (d, dir) in [Direction::Out, Direction::In].into_iter().enumerate() {
        let rho_g = global.rho(dir);
        let rho_l = local.rho(dir);
        let n_global = if dir == Direction::Out { pure.n_out } else { pure.n_in } as u64;
        let c = (((tau / rho_g) + TIME_EPS).floor() as u64).min(n_global);
        let times: Vec<f64> = trace.times(dir).collect();
        let slots = real_slots(times.iter().copied(), rho_g);
        let sent = slots.partition_point(|&s| s <= c);
        let mut phase2_slots = Vec::with_capacity(times.len() - sent);
        let mut prev = 0u64;
        for &t in &times[sent..] {
            let j = first_slot_at_or_after(t, tau, rho_l).max(prev + 1);
            phase2_slots.push(j);
            prev = j;
        }
        let total = padded_count(c + prev, bucket);
        let mut cells = direction_cells(&slots[..sent], c, rho_g);
        cells.extend(
            direction_cells(&phase2_slots, total - c, rho_l)
                .into_iter()
                .map(|(t, dummy)| (tau + t, dummy)),
        );
        if let Some(&j) = phase2_slots.last() {
            last_real = last_real.max(tau + j as f64 * rho_l);
        } else if sent > 0 {
            last_real = last_real.max(slots[sent - 1] as f64 * rho_g);
        }
        phase1[d] = c as u32;
        totals[d] = total as u32;
        per_dir.push(cells);
    }
    let inc = per_dir.pop().expect("two directions");
    let out = per_dir.pop().expect("two directions");
    Ok(DefendedTrace {
        cells: merge_cells(out, inc),
        last_real_time: last_real,
        switch_event: Some(SwitchEvent { time: tau, set_id }),
        n_out: totals[0],
        n_in: totals[1],
        phase1: Some((phase1[0], phase1[1])),
    })
}

/// End of the pure global schedule (last cell in either direction).
pub fn global_end_time(trace: &Trace, global: &TamarawParams) -> f64 {
    let s = schedule_summary(trace, global);
    (s.n_out as f64 * global.rho_out).max(s.n_in as f64 * global.rho_in)
}

/// Switch time and set, if any, with the decisions that led there.
pub type SwitchPlan = (Option<(f64, u32)>, Vec<DecisionEvent>);

/// The switch a trace would take, with the decision log that led to it.
pub fn plan_switch(trace: &Trace, config: &AdaptiveConfig, detector: &dyn SwitchDetector) -> Result<SwitchPlan> {
    let end = global_end_time(trace, &config.global);
    let mut events = Vec::new();
    for t in detector.decision_times() {
        if t >= end {
            break;
        }
        let d = detector.decide(trace, t)?;
        events.push(DecisionEvent {
            time: t,
            routed: d.routed,
            accepted: d.accepted,
        });
        if let Some(set) = d.accepted {
            return Ok((config.local(set).map(|_| (t, set)), events));
        }
    }
    Ok((None, events))
}

pub fn simulate_trace(trace: &Trace, config: &AdaptiveConfig, detector: &dyn SwitchDetector) -> Result<Simulated> {
    config.validate()?;
    let (switch, events) = plan_switch(trace, config, detector)?;
    let defended = match switch {
        None => defend(trace, &config.global)?,
        Some((tau, set)) => {
            let local = config.local(set).expect("plan_switch checks local params");
            switch_schedule(trace, &config.global, &local, tau, set)?
        }
    };
    Ok(Simulated { defended, events })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Correct,
    Wrong,
    NoDecision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub site_id: u32,
    pub instance_id: u32,
    pub bandwidth: f64,
    pub time: f64,
    pub switched: bool,
    pub set_id: Option<u32>,
    pub switch_time: Option<f64>,
    pub global_bandwidth: f64,
    pub global_time: f64,
    pub true_set: Option<u32>,
    pub outcome: Outcome,
}

impl TraceRow {
    pub fn total(&self) -> f64 {
        self.bandwidth + self.time
    }

    pub fn global_total(&self) -> f64 {
        self.global_bandwidth + self.global_time
    }

    pub fn bandwidth_savings(&self) -> f64 {
        self.global_bandwidth - self.bandwidth
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n_traces: usize,
    pub mean_bandwidth: f64,
    pub mean_time: f64,
    pub global_mean_bandwidth: f64,
    pub global_mean_time: f64,
    pub switched_fraction: f64,
    pub correct_rate: f64,
    pub wrong_rate: f64,
    pub no_decision_rate: f64,
}

impl Aggregate {
    pub fn from_rows(rows: &[TraceRow]) -> Aggregate {
        let n = rows.len().max(1) as f64;
        let mean = |f: &dyn Fn(&TraceRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        let rate = |o: Outcome| rows.iter().filter(|r| r.outcome == o).count() as f64 / n;
        Aggregate {
            n_traces: rows.len(),
            mean_bandwidth: mean(&|r| r.bandwidth),
            mean_time: mean(&|r| r.time),
            global_mean_bandwidth: mean(&|r| r.global_bandwidth),
            global_mean_time: mean(&|r| r.global_time),
            switched_fraction: mean(&|r| if r.switched { 1.0 } else { 0.0 }),
            correct_rate: rate(Outcome::Correct),
            wrong_rate: rate(Outcome::Wrong),
            no_decision_rate: rate(Outcome::NoDecision),
        }
    }

    pub fn mean_total(&self) -> f64 {
        self.mean_bandwidth + self.mean_time
    }

    pub fn global_mean_total(&self) -> f64 {
        self.global_mean_bandwidth + self.global_mean_time
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub global: TamarawParams,
    pub rows: Vec<TraceRow>,
    pub aggregate: Aggregate,
    /// Decision log per trace, in row order.
    pub events: Vec<Vec<DecisionEvent>>,
}

/// Simulates every trace and compares it with the pure global schedule.
/// `truth` gives the true set of a trace when known.
pub fn evaluate(
    traces: &[&Trace],
    config: &AdaptiveConfig,
    detector: &dyn SwitchDetector,
    truth: &(dyn Fn(&Trace) -> Option<u32> + Sync),
) -> Result<SimulationReport> {
    config.validate()?;
    let results: Vec<(TraceRow, Vec<DecisionEvent>)> = traces
        .par_iter()
        .map(|t| {
            let sim = simulate_trace(t, config, detector)?;
            let o: Overhead = overheads(t, &sim.defended)?;
            let g = overheads(t, &defend(t, &config.global)?)?;
            let set_id = sim.defended.switch_event.map(|e| e.set_id);
            let true_set = truth(t);
            let outcome = match (set_id, true_set) {
                (None, _) => Outcome::NoDecision,
                (Some(s), Some(ts)) if s == ts => Outcome::Correct,
                (Some(_), _) => Outcome::Wrong,
            };
            Ok((
                TraceRow {
                    site_id: t.site_id,
                    instance_id: t.instance_id,
                    bandwidth: o.bandwidth,
                    time: o.time,
                    switched: set_id.is_some(),
                    set_id,
                    switch_time: sim.defended.switch_event.map(|e| e.time),
                    global_bandwidth: g.bandwidth,
                    global_time: g.time,
                    true_set,
                    outcome,
                },
                sim.events,
            ))
        })
        .collect::<Result<_>>()?;
    let (rows, events): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    Ok(SimulationReport {
        global: config.global,
        aggregate: Aggregate::from_rows(&rows),
        rows,
        events,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Fixed-width histogram whose edges are multiples of `width` covering all values.
pub fn histogram(values: &[f64], width: f64) -> Histogram {
    if values.is_empty() || !(width > 0.0) {
        return Histogram {
            edges: Vec::new(),
            counts: Vec::new(),
        };
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let first = (lo / width).floor() as i64;
    let mut last = (hi / width).floor() as i64 + 1;
    if last <= first {
        last = first + 1;
    }
    let edges: Vec<f64> = (first..=last).map(|i| i as f64 * width).collect();
    let mut counts = vec![0; edges.len() - 1];
    for &v in values {
        let b = (((v / width).floor() as i64) - first).clamp(0, counts.len() as i64 - 1);
        counts[b as usize] += 1;
    }
    Histogram { edges, counts }
}

/// For each ceiling, the smallest bandwidth among `(time, bandwidth)` points
/// whose time overhead does not exceed it.
pub fn time_budget(points: &[(f64, f64)], ceilings: &[f64]) -> Vec<(f64, Option<f64>)> {
    ceilings
        .iter()
        .map(|&c| {
            let best = points
                .iter()
                .filter(|(t, _)| *t <= c)
                .map(|(_, b)| *b)
                .fold(None, |acc: Option<f64>, b| Some(acc.map_or(b, |a| a.min(b))));
            (c, best)
        })
        .collect()
}

/// Mean bandwidth along the lower-left front of `(time, bandwidth)` points,
/// integrated over time and divided by the time range.
pub fn area_under_front(points: &[(f64, f64)]) -> f64 {
    let mut front: Vec<(f64, f64)> = Vec::new();
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    for p in sorted {
        if front.last().is_none_or(|l| p.1 < l.1) {
            front.push(p);
        }
    }
    match front.len() {
        0 => 0.0,
        1 => front[0].1,
        _ => {
            let range = front[front.len() - 1].0 - front[0].0;
            if range <= 0.0 {
                return front[0].1;
            }
            let area: f64 = front
                .windows(2)
                .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
                .sum();
            area / range
        }
    }
}

/// Mean over traces of the bound that applies to each: the set bound of the
/// set it switched to, or `fallback` when it did not switch.
pub fn trace_averaged_bound(rows: &[TraceRow], set_bounds: &[f64], fallback: f64) -> f64 {
    if rows.is_empty() {
        return fallback;
    }
    rows.iter()
        .map(|r| {
            r.set_id
                .and_then(|s| set_bounds.get(s as usize).copied())
                .unwrap_or(fallback)
        })
        .sum::<f64>()
        / rows.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::Packet;

    fn sample() -> Trace {
        Trace::new(
            vec![
                Packet::new(0.0, Direction::Out),
                Packet::new(0.05, Direction::In),
                Packet::new(0.06, Direction::In),
                Packet::new(0.3, Direction::Out),
                Packet::new(0.9, Direction::In),
            ],
            1,
            2,
        )
    }

    #[test]
    fn never_detector_is_pure_global() {
        let g = TamarawParams::new(0.04, 0.012, 10).unwrap();
        let cfg = AdaptiveConfig {
            global: g,
            local: vec![Some(g)],
        };
        let s = simulate_trace(&sample(), &cfg, &NeverDetector).unwrap();
        assert_eq!(s.defended, defend(&sample(), &g).unwrap());
    }

    #[test]
    fn switch_at_zero_with_same_rates_is_pure_global() {
        let g = TamarawParams::new(0.04, 0.012, 10).unwrap();
        let mut d = switch_schedule(&sample(), &g, &g, 0.0, 0).unwrap();
        assert_eq!(d.phase1, Some((0, 0)));
        d.switch_event = None;
        d.phase1 = None;
        assert_eq!(d, defend(&sample(), &g).unwrap());
    }

    #[test]
    fn queued_packets_move_to_faster_rate() {
        let g = TamarawParams::new(0.5, 0.5, 1).unwrap();
        let l = TamarawParams::new(0.1, 0.1, 1).unwrap();
        // Global incoming slots are 1, 2, 3 (0.5, 1.0, 1.5); at tau = 0.6 one
        // incoming cell was sent; the queued one follows at 0.7, then a dummy
        // at 0.8 precedes the packet that arrives at 0.9.
        let d = switch_schedule(&sample(), &g, &l, 0.6, 3).unwrap();
        let incoming: Vec<f64> = d
            .cells
            .iter()
            .filter(|c| c.direction == Direction::In)
            .map(|c| c.time)
            .collect();
        assert_eq!(incoming.len(), 4);
        assert!((incoming[1] - 0.7).abs() < 1e-12);
        assert!((incoming[3] - 0.9).abs() < 1e-9);
        assert!((d.last_real_time - 0.9).abs() < 1e-9);
        assert_eq!(d.real_cells(), 5);
        assert_eq!(d.phase1, Some((1, 1)));
    }

    #[test]
    fn histogram_and_budget() {
        let h = histogram(&[0.0, 0.1, 0.3], 0.25);
        assert_eq!(h.edges, vec![0.0, 0.25, 0.5]);
        assert_eq!(h.counts, vec![2, 1]);
        let b = time_budget(&[(0.1, 3.0), (0.4, 2.0), (1.0, 1.0)], &[0.05, 0.45]);
        assert_eq!(b, vec![(0.05, None), (0.45, Some(2.0))]);
        assert_eq!(area_under_front(&[(0.5, 2.0)]), 2.0);
        assert!((area_under_front(&[(0.0, 2.0), (1.0, 0.0)]) - 1.0).abs() < 1e-12);
    }
}
