import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stoplab.errors import DegenerateStoppingFamily, InvalidParameter
from stoplab.paths import TimeGrid
from stoplab.processes import BrownianMotion, Constant, CorrelatedBM, ItoProcess, Staircase
from stoplab.stopderiv import (DerivEstimate, ShrinkFamily, characteristic_at,
                               convergence_probability_check, covariance_matrix_at,
                               covariance_rate_at, drift_at, estimate_from_sample, richardson,
                               variance_rate_at)
from stoplab.condest import sample_bundles
from stoplab.stopping import AtTime, FirstExit, OffsetFromS

GRID = TimeGrid(1e-3, 1000)


def _left_limit_factor(fam, dt=1e-3):
    # X_{T-} sits one step before S + h, so each scale sees h - dt of motion;
    # after extrapolation the relative bias is (1 + q) dt / h_finest
    return 1 - (1 + fam.factor) * dt / fam.scales[-1]


def test_family_scales_and_validation():
    fam = ShrinkFamily(initial=0.08, factor=0.5, levels=3)
    assert np.allclose(fam.scales, [0.08, 0.04, 0.02])
    assert fam.rules() == [OffsetFromS(0.08), OffsetFromS(0.04), OffsetFromS(0.02)]
    assert isinstance(ShrinkFamily("first_exit").rules()[0], FirstExit)
    for bad in (dict(kind="ball"), dict(initial=0.0), dict(factor=1.0), dict(levels=1)):
        with pytest.raises(InvalidParameter):
            ShrinkFamily(**bad)


@settings(max_examples=50, deadline=None)
@given(a=st.floats(-5, 5), b=st.floats(-5, 5), q=st.floats(0.1, 0.9))
def test_richardson_removes_linear_bias(a, b, q):
    h = 0.1
    fine, coarse = a + b * h * q, a + b * h
    assert richardson(fine, coarse, q) == pytest.approx(a, abs=1e-9)


def test_from_ratios_oracle():
    r = np.array([[1.0, 2.0, 3.0], [3.0, 4.0, 5.0]])
    est = DerivEstimate.from_ratios([0.4, 0.2, 0.1], r, 0.5)
    assert np.allclose(est.pooled, [2.0, 3.0, 4.0])
    assert np.allclose(est.stderr, [1.0, 1.0, 1.0])
    # per path 2*3 - 2 = 4 and 2*5 - 4 = 6
    assert est.extrapolated == pytest.approx(5.0)
    assert est.extrapolated_stderr == pytest.approx(1.0)
    assert not est.converged
    assert est.finest == 4.0 and est.finest_stderr == 1.0


def test_single_path_uses_inner_stderr():
    est = DerivEstimate.from_ratios([0.2, 0.1], [[1.0, 1.0]], 0.5,
                                    inner_stderr=[[0.1, 0.2]])
    assert est.extrapolated_stderr == pytest.approx(math.hypot(0.4, 0.1))


def test_staircase_ratios_decrease_to_zero():
    # drift ratio over [1/2, 1/2 + h] equals the staircase jump mass / h
    fam = ShrinkFamily(initial=0.25, factor=0.5, levels=5)
    est = drift_at(Staircase(), AtTime(0.5), fam, 2, 2, seed=0, grid=GRID)
    assert np.all(np.diff(est.pooled) <= 0)
    assert est.pooled[-1] < 0.02


def test_brownian_drift_and_variance():
    fam = ShrinkFamily(initial=0.1, levels=3)
    d = drift_at(BrownianMotion(), AtTime(0.5), fam, 40, 300, seed=1, grid=GRID)
    assert abs(d.extrapolated) <= 4 * d.extrapolated_stderr
    v = variance_rate_at(BrownianMotion(), AtTime(0.5), fam, 40, 300, seed=1, grid=GRID)
    assert abs(v.extrapolated - _left_limit_factor(fam)) <= 4 * v.extrapolated_stderr


def test_constant_coefficients_exact_drift():
    spec = ItoProcess(0.0, Constant(0.8), Constant(0.0))
    fam = ShrinkFamily(initial=0.1, levels=3)
    d = drift_at(spec, AtTime(0.3), fam, 3, 4, seed=0, grid=GRID)
    # the left limit removes one step of drift from each scale
    expected = 0.8 * (1 - 1e-3 / fam.scales)
    assert np.allclose(d.pooled, expected)
    assert d.extrapolated == pytest.approx(0.8 * _left_limit_factor(fam), abs=1e-9)


def test_variance_variants_agree():
    spec = ItoProcess(0.0, Constant(0.5), Constant(0.7))
    fam = ShrinkFamily(initial=0.1, levels=3)
    got = {}
    for v in ("cond_var", "rel_second_moment", "projected_centre"):
        got[v] = variance_rate_at(spec, AtTime(0.5), fam, 30, 300, seed=5, grid=GRID,
                                  variant=v).extrapolated
    got["integrated_drift_centre"] = variance_rate_at(
        spec, AtTime(0.5), fam, 30, 300, seed=5, grid=GRID, variant="integrated_drift_centre",
        integrand=Constant(0.5)).extrapolated
    target = 0.49 * _left_limit_factor(fam)
    for v in got.values():
        assert v == pytest.approx(target, abs=0.05)
    with pytest.raises(InvalidParameter):
        variance_rate_at(spec, AtTime(0.5), fam, 2, 3, seed=0, grid=GRID, variant="robust")


def test_wrong_projected_centre_biases_by_drift_error_squared():
    spec = ItoProcess(0.0, Constant(2.0), Constant(1.0))
    fam = ShrinkFamily(initial=0.2, levels=2)
    smp = sample_bundles(spec, GRID, AtTime(0.2), fam.rules(), 20, 400, seed=3)
    right = estimate_from_sample(smp, "variance", fam, variant="projected_centre", centre=2.0)
    wrong = estimate_from_sample(smp, "variance", fam, variant="projected_centre", centre=0.0)
    # error (B - 0)^2 h at the coarse scale
    assert wrong.pooled[0] - right.pooled[0] == pytest.approx(4 * 0.199, rel=0.1)


def test_family_invariance_offset_vs_exit():
    spec = ItoProcess(0.0, Constant(0.6), Constant(1.0))
    fine = TimeGrid(1e-4, 2000)
    off = drift_at(spec, AtTime(0.2), ShrinkFamily("offset", 0.1, 0.5, 3), 40, 300, seed=8,
                   grid=fine)
    ext = drift_at(spec, AtTime(0.2), ShrinkFamily("first_exit", 0.2, 0.5, 3, cap=0.5), 40, 300, seed=8,
                   grid=fine)
    tol = 4 * math.hypot(off.extrapolated_stderr, ext.extrapolated_stderr) + 0.05
    assert abs(off.extrapolated - ext.extrapolated) <= tol


def test_covariance_rate_and_matrix():
    spec = CorrelatedBM.pair(0.6)
    fam = ShrinkFamily(initial=0.1, levels=3)
    c = covariance_rate_at(spec, AtTime(0.3), fam, 30, 300, seed=2, grid=GRID)
    assert abs(c.extrapolated - 0.6 * _left_limit_factor(fam)) <= 4 * c.extrapolated_stderr
    mat = covariance_matrix_at(spec, AtTime(0.3), fam, 30, 300, seed=2, grid=GRID)
    assert np.allclose(mat.extrapolated, mat.extrapolated.T)
    assert mat.extrapolated[0, 1] == pytest.approx(c.extrapolated, abs=1e-12)
    assert mat.min_eigenvalue() > 0
    with pytest.raises(InvalidParameter):
        covariance_rate_at(spec, AtTime(0.3), fam, 2, 3, seed=2, grid=GRID, coords=(0, 2))


def test_degenerate_family_detected():
    fam = ShrinkFamily(initial=1e-4, factor=0.5, levels=2)
    with pytest.raises(DegenerateStoppingFamily):
        drift_at(BrownianMotion(), AtTime(0.1), fam, 2, 4, seed=0, grid=GRID)


def test_characteristic_square():
    fam = ShrinkFamily("first_exit", 0.2, 0.5, 3)
    spec = BrownianMotion(0.0)
    est = characteristic_at(spec, lambda x: x * x, fam, 1, 2000, seed=4,
                            grid=TimeGrid(1e-4, 1))
    assert est.extrapolated == pytest.approx(1.0, rel=0.1)
    with pytest.raises(InvalidParameter):
        characteristic_at(spec, np.cos, ShrinkFamily(), 1, 10, seed=0, grid=GRID)


def test_convergence_check():
    ok, frac = convergence_probability_check([0.99, 1.01, 1.2, 1.0], 1.0, 0.05, 0.3)
    assert ok and frac == 0.75
    bad, _ = convergence_probability_check([0.99, 1.01, 1.2, 1.0], 2.0, 0.05, 0.3)
    assert not bad


def test_artifacts(tmp_path):
    est = DerivEstimate.from_ratios([0.2, 0.1], [[1.0, 2.0], [1.5, 2.5]], 0.5, label="drift")
    est.to_csv(tmp_path / "d.csv")
    est.to_json(tmp_path / "d.json")
    rows = (tmp_path / "d.csv").read_text().splitlines()
    assert rows[0] == "scale_index,scale,ratio,stderr,frac_within_eps,converged"
    assert len(rows) == 3
    doc = json.loads((tmp_path / "d.json").read_text())
    assert doc["label"] == "drift" and doc["extrapolated"] == pytest.approx(3.25)
    one = DerivEstimate.from_ratios([0.2, 0.1], [[1.0, 2.0]], 0.5)
    one.to_json(tmp_path / "n.json")
    assert json.loads((tmp_path / "n.json").read_text())["stderr"] is None
