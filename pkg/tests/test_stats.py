import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats as sps

from stoplab.errors import InsufficientSamples, InvalidParameter
from stoplab.stats import (KS_CRITICAL, ks_critical, ks_normal, ks_two_sample, mean_ci,
                           normal_cdf, pooled_stderr, z_value)

samples = st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=60)


def test_mean_ci_oracle():
    ci = mean_ci([1.0, 3.0])
    # sd with 1/n normalisation is 1
    assert ci.mean == 2.0
    assert ci.halfwidth == pytest.approx(1.959963984540054 / math.sqrt(2))
    assert ci.contains(2.5) and not ci.contains(4.0)
    with pytest.raises(InsufficientSamples):
        mean_ci([1.0])
    with pytest.raises(InvalidParameter):
        mean_ci([1.0, 2.0], level=1.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-100, 100, allow_nan=False), min_size=2, max_size=50))
def test_mean_ci_halfwidth_scales_with_root_n(xs):
    x = np.array(xs)
    a = mean_ci(x)
    b = mean_ci(np.repeat(x, 2))
    assert b.mean == pytest.approx(a.mean, abs=1e-9)
    assert b.halfwidth == pytest.approx(a.halfwidth / math.sqrt(2), rel=1e-9, abs=1e-12)


def test_z_and_cdf():
    assert z_value(0.95) == pytest.approx(1.959964, abs=1e-6)
    assert float(normal_cdf(1.0)) == pytest.approx(sps.norm.cdf(1.0), abs=1e-15)
    assert float(normal_cdf(3.0, 1.0, 2.0)) == pytest.approx(sps.norm.cdf(1.0), abs=1e-15)


def test_ks_critical_table_and_formula():
    assert ks_critical(0.05) == 1.358
    assert ks_critical(0.01) == 1.628
    # off-table values use the asymptotic tail approximation
    assert ks_critical(0.02) == pytest.approx(math.sqrt(-math.log(0.01) / 2))
    for a, c in KS_CRITICAL.items():
        assert c == pytest.approx(sps.kstwobign.isf(a), abs=2e-3)
    with pytest.raises(InvalidParameter):
        ks_critical(1.5)


def test_ks_two_sample_matches_scipy():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal(300), rng.standard_normal(250) + 0.3
    ours = ks_two_sample(a, b)
    assert ours.statistic == pytest.approx(sps.ks_2samp(a, b).statistic, abs=1e-12)
    assert ours.reject


def test_ks_normal_matches_scipy():
    rng = np.random.default_rng(1)
    x = rng.normal(0.2, 1.5, 400)
    ours = ks_normal(x, 0.2, 1.5)
    assert ours.statistic == pytest.approx(sps.kstest(x, "norm", (0.2, 1.5)).statistic,
                                           abs=1e-12)
    assert not ours.reject
    assert ks_normal(x, 1.0, 1.5).reject
    with pytest.raises(InvalidParameter):
        ks_normal(x, 0.0, 0.0)


@settings(max_examples=60, deadline=None)
@given(samples, samples)
def test_ks_two_sample_symmetric_and_bounded(a, b):
    ab, ba = ks_two_sample(a, b), ks_two_sample(b, a)
    assert ab.statistic == ba.statistic
    assert 0.0 <= ab.statistic <= 1.0
    assert ks_two_sample(a, a).statistic == 0.0


def test_small_samples_never_reject():
    r = ks_two_sample(np.zeros(20), np.ones(20))
    assert r.statistic == 1.0 and not r.reject and not r.reliable
    with pytest.raises(InsufficientSamples):
        ks_two_sample([], [1.0])


def test_pooled_stderr():
    x = np.array([[1.0, 2.0], [3.0, 6.0]])
    assert np.allclose(pooled_stderr(x), [1.0, 2.0])
    assert np.all(np.isnan(pooled_stderr(x[:1])))
