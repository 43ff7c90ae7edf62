mod common;

use std::collections::HashMap;

use proptest::prelude::*;
use tamaraw_core::adaptive::{
    evaluate, global_end_time, simulate_trace, switch_schedule, AdaptiveConfig, NeverDetector, OracleDetector,
};
use tamaraw_core::anonymity::select_local_params;
use tamaraw_core::synth::{generate, SynthConfig};
use tamaraw_core::tamaraw::{build_param_grid, defend, TamarawParams};
use tamaraw_core::trace::{Direction, Trace};

fn times(trace: &Trace, d: Direction) -> Vec<f64> {
    trace
        .packets
        .iter()
        .filter(|p| p.direction == d)
        .map(|p| p.time)
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn never_switching_is_plain_tamaraw(seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let trace = common::random_trace(&mut r, 60, 5.0, 0, 0);
        let global = common::random_params(&mut r);
        let config = AdaptiveConfig { global, local: vec![Some(global.with_bucket(global.bucket))] };
        let sim = simulate_trace(&trace, &config, &NeverDetector).unwrap();
        prop_assert_eq!(sim.defended, defend(&trace, &global).unwrap());
        prop_assert!(sim.events.is_empty());
    }

    #[test]
    fn switch_matches_tick_simulation(seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let trace = common::random_trace(&mut r, 60, 5.0, 0, 0);
        let global = common::random_params(&mut r);
        let local = TamarawParams::new(
            rand::Rng::random_range(&mut r, 0.001..0.2),
            rand::Rng::random_range(&mut r, 0.0005..0.1),
            global.bucket,
        ).unwrap();
        let end = global_end_time(&trace, &global);
        let tau = rand::Rng::random_range(&mut r, 0.0..end.max(0.01));
        let got = switch_schedule(&trace, &global, &local, tau, 3).unwrap();

        for (d, dir) in [Direction::Out, Direction::In].into_iter().enumerate() {
            let ts = times(&trace, dir);
            let c = common::oracle_phase1(&ts, global.rho(dir), global.bucket, tau);
            let want = common::oracle_switch_direction(&ts, global.rho(dir), c, tau, local.rho(dir), global.bucket);
            let cells: Vec<(f64, bool)> = got.cells.iter().filter(|x| x.direction == dir).map(|x| (x.time, x.is_dummy)).collect();
            prop_assert_eq!(cells.len(), want.len());
            for (a, b) in cells.iter().zip(&want) {
                prop_assert!((a.0 - b.0).abs() < 1e-9 && a.1 == b.1, "{:?} vs {:?}", a, b);
            }
            // Real packets are conserved and never leave before they arrive.
            let real: Vec<f64> = cells.iter().filter(|x| !x.1).map(|x| x.0).collect();
            prop_assert_eq!(real.len(), ts.len());
            for (sent, arrived) in real.iter().zip(&ts) {
                prop_assert!(*sent >= arrived - 1e-9);
            }
            prop_assert_eq!(cells.len() % global.bucket as usize, 0);
            let phase1 = got.phase1.unwrap();
            prop_assert_eq!(if d == 0 { phase1.0 } else { phase1.1 } as u64, c);
        }
        prop_assert_eq!(got.n_out as usize + got.n_in as usize, got.cells.len());
        prop_assert!(got.cells.windows(2).all(|w| w[0].time <= w[1].time));
        let event = got.switch_event.unwrap();
        prop_assert_eq!(event.set_id, 3);
        prop_assert_eq!(event.time, tau);
    }
}

#[test]
fn cells_before_the_switch_follow_the_global_schedule() {
    let mut r = common::rng(11);
    for _ in 0..100 {
        let trace = common::random_trace(&mut r, 80, 4.0, 0, 0);
        let global = common::random_params(&mut r);
        let local = common::random_params(&mut r).with_bucket(global.bucket);
        let tau = global_end_time(&trace, &global) / 2.0;
        let switched = switch_schedule(&trace, &global, &local, tau, 0).unwrap();
        let plain = defend(&trace, &global).unwrap();
        let before = |cells: &[tamaraw_core::tamaraw::Cell]| -> Vec<(u64, Direction, bool)> {
            cells
                .iter()
                .filter(|c| c.time <= tau - 1e-9)
                .map(|c| (c.time.to_bits(), c.direction, c.is_dummy))
                .collect()
        };
        assert_eq!(before(&switched.cells), before(&plain.cells));
    }
}

#[test]
fn oracle_detector_saves_overhead_on_training_data() {
    let corpus = generate(&SynthConfig {
        n_sites: 6,
        traces_per_site: 12,
        ..SynthConfig::default()
    });
    let global = TamarawParams::new(0.04, 0.012, 100).unwrap();
    let grid = build_param_grid(&global, 7.0, 14).unwrap();
    // One set per site; the oracle knows each trace's site.
    let mut local = Vec::new();
    let mut assignments = HashMap::new();
    for site in 0..6u32 {
        let members: Vec<Trace> = corpus.traces.iter().filter(|t| t.site_id == site).cloned().collect();
        for t in &members {
            assignments.insert((t.site_id, t.instance_id), site);
        }
        local.push(select_local_params(&members, &global, &grid));
    }
    assert!(local.iter().any(Option::is_some));
    let config = AdaptiveConfig { global, local };
    let detector = OracleDetector { assignments, time: 0.5 };
    let traces: Vec<&Trace> = corpus.traces.iter().collect();
    let report = evaluate(&traces, &config, &detector, &|t: &Trace| Some(t.site_id)).unwrap();
    let adaptive = report.aggregate.mean_total();
    let plain = report.aggregate.global_mean_total();
    assert!(adaptive < plain, "adaptive {adaptive} vs global {plain}");
    for row in &report.rows {
        if row.switched {
            assert_eq!(row.switch_time, Some(0.5));
            assert_eq!(row.set_id, Some(row.site_id));
        }
    }
}

#[test]
fn local_parameters_must_share_the_bucket() {
    let global = TamarawParams::new(0.04, 0.012, 100).unwrap();
    let config = AdaptiveConfig {
        global,
        local: vec![Some(global.with_bucket(50))],
    };
    let trace = Trace::new(vec![tamaraw_core::trace::Packet::new(0.1, Direction::Out)], 0, 0);
    assert!(simulate_trace(&trace, &config, &NeverDetector).is_err());
}
