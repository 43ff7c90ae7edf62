"""Smoke test for the `tamaraw` extension module.

Build and install the module first:

    pip install maturin
    maturin develop --release -m crates/py/Cargo.toml

then run `python python/smoke_test.py`.
"""

import math
import tempfile

import tamaraw


def check_defend():
    trace = tamaraw.Trace([(0.0, 1), (0.01, -1), (0.02, -1), (0.5, 1)], site_id=3)
    params = tamaraw.Params(0.04, 0.012, bucket=10)
    defended = tamaraw.defend(trace, params)
    assert (defended.n_out, defended.n_in) == tamaraw.defended_lengths(trace, params)
    assert defended.n_out % 10 == 0 and defended.n_in % 10 == 0
    cells = defended.cells()
    assert sum(1 for c in cells if not c[2]) == len(trace)
    for d, rho in ((1, 0.04), (-1, 0.012)):
        times = [c[0] for c in cells if c[1] == d]
        gaps = [b - a for a, b in zip(times, times[1:])]
        assert all(math.isclose(g, rho, rel_tol=1e-9) for g in gaps)
    bandwidth, time = tamaraw.overhead(trace, params)
    assert math.isclose(bandwidth, (len(defended) - len(trace)) / len(trace))
    assert time >= 0.0


def check_grid_and_front():
    grid = tamaraw.param_grid(tamaraw.Params(0.04, 0.012, 100))
    assert len(grid) == 196
    traces = [
        tamaraw.Trace([(0.0, 1), (0.1 * i, -1), (0.3 * i, -1)], site_id=i, instance_id=0)
        for i in range(1, 6)
    ]
    front = tamaraw.pareto_front(traces, grid)
    assert front
    times = [t for _, _, t in front]
    assert times == sorted(times)


def check_bounds():
    assert tamaraw.weighted_delta([0, 0, 1]) == 1.5
    assert tamaraw.attacker_accuracy([(0, 1), (1, 1), (0, 2), (1, 2)]) == 0.5
    sets = [[(s, 0) for s in range(5)], [(0, 0), (0, 0), (0, 0), (1, 0), (1, 0)]]
    assert math.isclose(tamaraw.global_bound(sets, [0.5, 0.5]), 0.4)
    try:
        tamaraw.global_bound(sets, [0.5, 0.6])
    except tamaraw.TamarawError:
        pass
    else:
        raise AssertionError("weights not summing to one must be rejected")


def check_errors():
    try:
        tamaraw.Params(-1.0, 0.01)
    except ValueError:
        pass
    else:
        raise AssertionError("negative rate accepted")
    try:
        tamaraw.Trace.parse("0.0\t1\nbad line\n")
    except tamaraw.TamarawError:
        pass
    else:
        raise AssertionError("malformed line accepted")


def check_pipeline():
    config = '{"synth": {"n_sites": 4, "traces_per_site": 12}}'
    with tempfile.TemporaryDirectory() as ws:
        p = tamaraw.Pipeline(ws, config=config, seed=5)
        assert "4 sites" in p.run("synth")
        assert "Pareto" in p.run("pareto")
        try:
            p.run("sets")
        except ValueError as e:
            assert "patterns.json" in str(e)
        else:
            raise AssertionError("missing upstream artifact not reported")


if __name__ == "__main__":
    check_defend()
    check_grid_and_front()
    check_bounds()
    check_errors()
    check_pipeline()
    print("python smoke test passed")
