import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats as sps

from stoplab.errors import InsufficientIntrinsicTime, InvalidParameter, ScenarioInvalid
from stoplab.paths import SamplePath, TimeGrid
from stoplab.processes import AbsAffine, BrownianMotion, Constant, CorrelatedBM, simulate
from stoplab.stopderiv import DerivEstimate
from stoplab.stopping import AtTime, Debut
from stoplab.theorems import (FAIL, INCONCLUSIVE, PASS, CheckReport, Comparison, RuleId,
                              Scenario, check_distinct_distributions, check_ftc, check_identity,
                              check_quadratic_variation, check_zero_drift,
                              exit_indicator_fixture, levy_increments, levy_process, phi_apply,
                              phi_invert, realized_qv, reflection_hit_probability, run_suite,
                              suite_ids)


def test_comparison_band_and_verdicts():
    c = Comparison("x", 1.0, 1.05, 0.01, 0.0, tol_abs=0.02, z=3.0)
    assert c.band == pytest.approx(0.03)
    assert c.verdict == FAIL
    assert Comparison("x", 1.0, 1.025, 0.01, 0.0, tol_abs=0.02, z=3.0).verdict == PASS
    assert Comparison("x", 1.0, 1.015, 0.0, 0.0, tol_abs=0.02, z=3.0).verdict == PASS
    assert Comparison("x", math.nan, 1.0).verdict == INCONCLUSIVE


def test_comparison_checks_finest_scale_too():
    left = DerivEstimate.from_ratios([0.2, 0.1], [[1.0, 1.5], [1.0, 1.5]], 0.5)
    # extrapolated 2.0 matches, finest 1.5 does not
    c = Comparison.of("x", left, 2.0, tol_abs=0.1, z=3.0)
    assert c.left == pytest.approx(2.0) and c.left_finest == 1.5
    assert c.verdict == FAIL


def test_report_verdict_and_primary():
    ok = Comparison("a", 1.0, 1.0)
    bad = Comparison("b", 1.0, 2.0)
    nan = Comparison("c", math.nan, 1.0)
    assert CheckReport("r", [ok], 1).verdict == PASS
    assert CheckReport("r", [ok, nan], 1).verdict == INCONCLUSIVE
    rep = CheckReport("r", [ok, nan, bad], 1)
    assert rep.verdict == FAIL and rep.primary is nan
    assert CheckReport("r", [], 1).verdict == INCONCLUSIVE
    assert rep.comparison("b") is bad
    d = CheckReport("r", [ok], 1, runtime_s=2.5).to_dict()
    assert d["runtime_s"] is None and d["verdict"] == PASS
    assert CheckReport("r", [ok], 1, runtime_s=2.5).to_dict(include_runtime=True)["runtime_s"] == 2.5


def test_scenario_validation():
    with pytest.raises(InvalidParameter):
        Scenario(M=0)
    with pytest.raises(InvalidParameter):
        Scenario(tol_abs=-1.0)


def test_realized_qv_and_reflection():
    assert realized_qv(np.array([0.0, 1.0, -1.0])) == 5.0
    assert reflection_hit_probability(1.0) == pytest.approx(2 * sps.norm.sf(1.0))
    assert reflection_hit_probability(20.0) == pytest.approx(0.8231, abs=1e-4)


@pytest.mark.parametrize("rule", list(RuleId))
def test_identity_rules_hold(rule, small_scenario):
    rep = check_identity(rule, small_scenario)
    assert rep.verdict == PASS, rep.to_dict()
    assert rep.runtime_s > 0


def test_identity_expected_values(small_scenario):
    rep = check_identity("ito1d_drift", small_scenario)
    assert rep.comparisons[0].expected == pytest.approx(0.42)
    with pytest.raises(InvalidParameter):
        check_identity("quotient_rule", small_scenario)


def test_identity_dimension_mismatch(small_scenario):
    from dataclasses import replace
    sc = replace(small_scenario, process=BrownianMotion())
    with pytest.raises(ScenarioInvalid):
        check_identity("itond_drift", sc)


def test_zero_drift_brownian(small_scenario):
    rep = check_zero_drift(BrownianMotion(), [AtTime(0.3)], small_scenario)
    assert rep.verdict == PASS
    assert rep.comparison("optional_stopping").verdict == PASS


def test_ftc_wrong_drift_fails(small_scenario):
    rep = check_ftc(0.0, 0.3, 0.7, [AtTime(0.5)], small_scenario)
    assert rep.comparison("drift@0").verdict == PASS
    # a drifting process must not pass the zero-drift check
    from dataclasses import replace
    sc = replace(small_scenario, n_outer=40, M=400, tol_abs=0.0)
    assert check_zero_drift(_drifting(), [AtTime(0.5)], sc, spot_checks=False).verdict == FAIL


def _drifting():
    from stoplab.processes import ItoProcess
    return ItoProcess(0.0, Constant(2.0), Constant(0.5))


def test_quadratic_variation_small(small_scenario):
    rep = check_quadratic_variation(BrownianMotion(), 1.0, small_scenario, n_paths=100)
    c = rep.comparison("qv")
    assert c.verdict == PASS and 0.9 < c.left < 1.1


def _rough_path(seed, n=400, dt=0.01):
    return simulate(BrownianMotion(), TimeGrid(dt, n), seed)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2 ** 31))
def test_phi_round_trip(seed):
    f = _rough_path(seed)
    a = AbsAffine(1.0, 0.5, 0.5, 2.0)
    g = phi_apply(a, f, dt=1e-3)
    back = phi_invert(a, g, dt=f.grid.dt)
    n = min(len(back.values), len(f.values))
    assert n > 100
    err = np.max(np.abs(back.values[:n] - f.values[:n]))
    assert err <= 2 * np.max(np.abs(np.diff(f.values)))


def test_phi_constant_rate_is_rescaling():
    f = _rough_path(1, n=100, dt=0.01)
    g = phi_apply(Constant(2.0), f, dt=0.02)
    # g(s) = f(s / 2): sample k of g is sample k of f
    assert np.array_equal(g.values, f.values[: len(g.values)])
    with pytest.raises(InsufficientIntrinsicTime):
        phi_apply(Constant(2.0), f, s_max=3.0)
    frozen = phi_apply(Constant(2.0), f, s_max=3.0, on_exhaustion="freeze", dt=0.02)
    assert frozen.values[-1] == f.values[-1]
    with pytest.raises(InvalidParameter):
        phi_apply(Constant(2.0), f, on_exhaustion="wrap")


def test_levy_increments_standard_normal():
    spec, a = levy_process()
    w = levy_increments(spec, a, TimeGrid.from_horizon(1e-3, 8.5), 500, 3, 4)
    inc = np.diff(w - w[:, :1], axis=1)
    assert abs(inc.var() - 1.0) < 0.15
    assert abs(inc.mean()) < 0.1


def test_levy_exhaustion():
    spec, a = levy_process()
    with pytest.raises(InsufficientIntrinsicTime):
        levy_increments(spec, a, TimeGrid.from_horizon(1e-3, 1.0), 10, 0, 4)


def test_exit_indicator_fixture_freezes_clock():
    spec, a = exit_indicator_fixture(0.3)
    w = levy_increments(spec, a, TimeGrid.from_horizon(1e-3, 4.0), 50, 2, 2,
                        on_exhaustion="freeze", require_positive=False)
    # the debut overshoots the level by O(sqrt(dt)) on the grid
    assert np.all(w[:, -1] <= 0.3 + 5 * math.sqrt(1e-3))
    # a path that has reached the level by intrinsic time 1 stays frozen
    hit = w[:, 1] >= 0.3
    assert hit.any() and np.array_equal(w[hit, 2], w[hit, 1])


def test_distinct_distributions_same_law_not_rejected(small_scenario):
    rep = check_distinct_distributions(BrownianMotion(), BrownianMotion(), 1.0, 400,
                                       small_scenario)
    assert rep.verdict == FAIL and not rep.details["ks_reject"]


def test_suite_ids_and_unknown():
    ids = suite_ids()
    assert "ftc" in ids and "linearity" in ids and len(ids) == len(set(ids)) == 23
    with pytest.raises(InvalidParameter):
        run_suite(Scenario(), only=["nope"])


def test_suite_errors_become_inconclusive():
    # a family whose finest scale is below the grid step collapses every stop onto S
    from stoplab.stopderiv import ShrinkFamily
    sc = Scenario(grid=TimeGrid(1e-2, 100), family=ShrinkFamily(initial=0.01, levels=2),
                  n_outer=2, M=4, n_paths=10)
    reps = run_suite(sc, only=["linearity"])
    assert reps[0].verdict == INCONCLUSIVE
    assert reps[0].details["error"]["error"] == "degenerate_stopping_family"
    seen = []
    with pytest.raises(Exception):
        run_suite(sc, only=["linearity"], on_error=lambda n, e: seen.append(n))
    assert seen == ["linearity"]
