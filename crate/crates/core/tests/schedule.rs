mod common;

use proptest::prelude::*;
use tamaraw_core::tamaraw::{defend, defended_lengths, fast_overhead, overheads, TamarawParams};
use tamaraw_core::trace::{Direction, Packet, Trace};

fn arb_trace() -> impl Strategy<Value = Trace> {
    prop::collection::vec((0.0f64..8.0, any::<bool>()), 1..120).prop_map(|mut v| {
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        let packets = v
            .into_iter()
            .map(|(t, out)| Packet::new(t, if out { Direction::Out } else { Direction::In }))
            .collect();
        Trace::new(packets, 0, 0)
    })
}

fn arb_params() -> impl Strategy<Value = TamarawParams> {
    (
        0.001f64..0.2,
        0.0005f64..0.1,
        prop::sample::select(vec![1u32, 3, 10, 100]),
    )
        .prop_map(|(o, i, l)| TamarawParams::new(o, i, l).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn matches_tick_by_tick_simulation(trace in arb_trace(), p in arb_params()) {
        let d = defend(&trace, &p).unwrap();
        let expected = common::oracle_defend(&trace, &p);
        prop_assert_eq!(d.cells.len(), expected.len());
        for (c, e) in d.cells.iter().zip(&expected) {
            prop_assert_eq!(c.time.to_bits(), e.0.to_bits());
            prop_assert_eq!(c.direction, e.1);
            prop_assert_eq!(c.is_dummy, e.2);
        }
    }

    #[test]
    fn lengths_agree_with_cells(trace in arb_trace(), p in arb_params()) {
        let d = defend(&trace, &p).unwrap();
        let (o, i) = defended_lengths(&trace, &p);
        prop_assert_eq!((o, i), (d.n_out, d.n_in));
        prop_assert_eq!((o, i), common::oracle_lengths(&trace, &p));
        prop_assert_eq!(o % p.bucket, 0);
        prop_assert_eq!(i % p.bucket, 0);
        let outs = d.cells.iter().filter(|c| c.direction == Direction::Out).count() as u32;
        prop_assert_eq!(outs, o);
    }

    #[test]
    fn fast_overhead_matches_materialized(trace in arb_trace(), p in arb_params()) {
        let d = defend(&trace, &p).unwrap();
        let full = overheads(&trace, &d).unwrap();
        let fast = fast_overhead(&trace, &p);
        prop_assert!((full.bandwidth - fast.bandwidth).abs() < 1e-12);
        prop_assert!((full.time - fast.time).abs() < 1e-12);
        let n = trace.len() as f64;
        prop_assert!((full.bandwidth - (d.cells.len() as f64 - n) / n).abs() < 1e-12);
    }
}

#[test]
fn fixture_trace_is_deterministic() {
    let trace = Trace::new(
        vec![
            Packet::new(0.0, Direction::Out),
            Packet::new(0.005, Direction::In),
            Packet::new(0.006, Direction::In),
            Packet::new(0.1, Direction::Out),
        ],
        0,
        0,
    );
    let p = TamarawParams::new(0.04, 0.012, 100).unwrap();
    let a = defend(&trace, &p).unwrap();
    assert_eq!(a, defend(&trace, &p).unwrap());
    let reals: Vec<(f64, Direction)> = a
        .cells
        .iter()
        .filter(|c| !c.is_dummy)
        .map(|c| (c.time, c.direction))
        .collect();
    // Outgoing cells at 0.04 and 0.12 (0.08 < 0.1); incoming at 0.012 and 0.024.
    let expected = [
        (0.012, Direction::In),
        (0.024, Direction::In),
        (0.04, Direction::Out),
        (0.12, Direction::Out),
    ];
    assert_eq!(reals.len(), 4);
    for (r, e) in reals.iter().zip(expected) {
        assert!((r.0 - e.0).abs() < 1e-12 && r.1 == e.1, "{r:?} vs {e:?}");
    }
    assert_eq!((a.n_out, a.n_in), (100, 100));
}

#[test]
fn empty_and_invalid_inputs() {
    let p = TamarawParams::new(0.04, 0.012, 100).unwrap();
    assert!(defend(&Trace::new(Vec::new(), 0, 0), &p).is_err());
    assert!(TamarawParams::new(0.0, 0.01, 10).is_err());
    assert!(TamarawParams::new(0.01, 0.01, 0).is_err());
}
