import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stoplab.errors import InvalidParameter, InvalidStopOrder, OutOfRange
from stoplab.paths import (SamplePath, TimeGrid, VectorPath, cadlag_eval, left_limit_at_stop,
                           left_values, path_rng, read_path_csv, write_path_csv)
from stoplab.processes import BrownianMotion, Staircase, simulate, simulate_ensemble


def test_grid_basics():
    g = TimeGrid.from_horizon(0.01, 1.0)
    assert g.n_steps == 100
    assert g.horizon == pytest.approx(1.0)
    assert g.times[3] == 3 * 0.01
    assert g.steps_for(0.3) == 30


@pytest.mark.parametrize("dt,n", [(0.0, 10), (-1e-3, 10), (float("nan"), 10), (0.1, 0), (0.1, 2.5)])
def test_grid_rejects_bad_fields(dt, n):
    with pytest.raises(InvalidParameter):
        TimeGrid(dt, n)


def test_cadlag_eval_constant_path():
    g = TimeGrid(0.1, 10)
    p = SamplePath(g, np.full(11, 3.5))
    for t in (0.0, 0.05, 0.33, 1.0):
        assert cadlag_eval(p, t) == 3.5


def test_cadlag_eval_identity_on_grid():
    g = TimeGrid(0.01, 100)
    p = SamplePath(g, g.times)
    assert cadlag_eval(p, g.time(3)) == 3 * 0.01


def test_cadlag_eval_staircase():
    g = TimeGrid(0.01, 100)
    p = simulate(Staircase(), g, seed=0)
    assert cadlag_eval(p, 0.6) == 0.25


def test_cadlag_eval_out_of_range():
    p = SamplePath(TimeGrid(0.1, 10), np.zeros(11))
    with pytest.raises(OutOfRange):
        cadlag_eval(p, 1.5)
    with pytest.raises(OutOfRange):
        cadlag_eval(p, -0.1)


def test_left_limit_conventions():
    g = TimeGrid(0.01, 100)
    p = SamplePath(g, np.sin(g.times))
    assert left_limit_at_stop(p, 20, 20) == p.values[20]
    assert left_limit_at_stop(p, 20, 30) == p.values[29]
    with pytest.raises(InvalidStopOrder):
        left_limit_at_stop(p, 30, 20)


def test_left_limit_staircase():
    g = TimeGrid(0.1, 10)
    p = simulate(Staircase(), g, seed=0)
    assert left_limit_at_stop(p, 0, 10) == 0.25


def test_left_values_matches_scalar_version(rng):
    g = TimeGrid(0.01, 50)
    v = rng.standard_normal((6, 51))
    idx = np.array([5, 7, 9, 5, 20, 50])
    got = left_values(v, idx, 5)
    for i in range(6):
        assert got[i] == left_limit_at_stop(SamplePath(g, v[i]), 5, idx[i])


@settings(max_examples=60, deadline=None)
@given(dt=st.sampled_from([1e-4, 1e-3, 0.01, 0.1, 0.3, 1 / 3]), k=st.integers(0, 10_000))
def test_cadlag_eval_exact_on_grid_points(dt, k):
    g = TimeGrid(dt, max(k, 1))
    p = SamplePath(g, np.arange(g.n_steps + 1, dtype=float))
    assert cadlag_eval(p, k * dt) == float(k)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=2, max_size=50),
       st.lists(st.floats(0, 1), min_size=2, max_size=20))
def test_cadlag_eval_monotone_for_monotone_paths(incs, ts):
    g = TimeGrid(0.1, len(incs) - 1)
    p = SamplePath(g, np.cumsum(incs))
    ts = sorted(t * g.horizon for t in ts)
    vals = [cadlag_eval(p, t) for t in ts]
    assert all(a <= b for a, b in zip(vals, vals[1:]))


def test_ensemble_regeneration_is_bit_identical():
    g = TimeGrid(1e-3, 200)
    a = simulate_ensemble(BrownianMotion(), g, 5, seed=99)
    b = simulate_ensemble(BrownianMotion(), g, 5, seed=99)
    assert np.array_equal(a.values, b.values)
    # path i does not depend on how many paths were drawn
    c = simulate_ensemble(BrownianMotion(), g, 2, seed=99, first_index=3)
    assert np.array_equal(a.values[3:], c.values)
    assert np.array_equal(simulate(BrownianMotion(), g, 99, index=4).values, a.values[4])


def test_streams_are_independent_keys():
    x = path_rng(1, 0, 0).standard_normal(4)
    y = path_rng(1, 1, 0).standard_normal(4)
    z = path_rng(1, 0, 1).standard_normal(4)
    assert not np.array_equal(x, y) and not np.array_equal(x, z)
    assert np.array_equal(x, path_rng(1, 0, 0).standard_normal(4))


def test_path_rng_requires_seed():
    with pytest.raises(InvalidParameter):
        path_rng(None, 0, 0)


def test_csv_round_trip(tmp_path, rng):
    g = TimeGrid(0.01, 20)
    p = SamplePath(g, rng.standard_normal(21))
    write_path_csv(tmp_path / "p.csv", p)
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "t,x" and len(lines) == 22
    q = read_path_csv(tmp_path / "p.csv")
    assert np.array_equal(p.values, q.values)
    assert q.grid.n_steps == 20

    vp = VectorPath(g, rng.standard_normal((21, 3)))
    vp.to_csv(tmp_path / "v.csv")
    assert (tmp_path / "v.csv").read_text().splitlines()[0] == "t,x1,x2,x3"
    assert np.array_equal(read_path_csv(tmp_path / "v.csv").values, vp.values)


def test_paths_are_read_only():
    p = SamplePath(TimeGrid(0.1, 2), [0.0, 1.0, 2.0])
    with pytest.raises(ValueError):
        p.values[0] = 5.0


def test_sample_path_length_checked():
    with pytest.raises(InvalidParameter):
        SamplePath(TimeGrid(0.1, 3), [0.0, 1.0])
