"""Confidence intervals and Kolmogorov-Smirnov tests with asymptotic critical values."""

from __future__ import annotations

import math
from dataclasses import dataclass
from statistics import NormalDist
from typing import Optional

import numpy as np
from scipy.special import ndtr

from .errors import InsufficientSamples, InvalidParameter

# c(alpha) for the two-sided asymptotic Kolmogorov distribution
KS_CRITICAL = {0.10: 1.224, 0.05: 1.358, 0.025: 1.480, 0.01: 1.628, 0.005: 1.731, 0.001: 1.949}

# below this many samples a KS test never returns a reject verdict
KS_MIN_SAMPLES = 100


@dataclass(frozen=True)
class CI:
    mean: float
    halfwidth: float
    level: float = 0.95
    n: int = 0

    @property
    def low(self) -> float:
        return self.mean - self.halfwidth

    @property
    def high(self) -> float:
        return self.mean + self.halfwidth

    def contains(self, x: float) -> bool:
        return self.low <= x <= self.high


def z_value(level: float) -> float:
    if not 0 < level < 1:
        raise InvalidParameter(f"confidence level must lie in (0, 1), got {level}")
    return NormalDist().inv_cdf(0.5 + level / 2)


def mean_ci(samples, level: float = 0.95) -> CI:
    """CLT interval ``mean +/- z * sd / sqrt(n)`` (sd with 1/n normalisation)."""
    x = np.asarray(samples, dtype=float).ravel()
    n = x.size
    if n < 2:
        raise InsufficientSamples(f"need at least 2 samples, got {n}", n=n)
    mean = float(np.sum(x) / n)
    sd = float(np.sqrt(np.sum((x - mean) * (x - mean)) / n))
    return CI(mean, z_value(level) * sd / math.sqrt(n), level, n)


def normal_cdf(x, mu: float = 0.0, sigma: float = 1.0):
    return ndtr((np.asarray(x, dtype=float) - mu) / sigma)


def ks_critical(alpha: float) -> float:
    if alpha in KS_CRITICAL:
        return KS_CRITICAL[alpha]
    if not 0 < alpha < 1:
        raise InvalidParameter(f"alpha must lie in (0, 1), got {alpha}")
    return math.sqrt(-math.log(alpha / 2) / 2)


@dataclass(frozen=True)
class KSResult:
    statistic: float
    critical: float
    reject: bool
    n: int
    m: Optional[int] = None
    alpha: float = 0.01

    @property
    def reliable(self) -> bool:
        """Whether the sample sizes allow a verdict at all."""
        return min(self.n, self.m or self.n) >= KS_MIN_SAMPLES


def ks_two_sample(a, b, alpha: float = 0.01) -> KSResult:
    """Sup-distance between the two empirical CDFs."""
    a = np.sort(np.asarray(a, dtype=float).ravel())
    b = np.sort(np.asarray(b, dtype=float).ravel())
    n, m = a.size, b.size
    if n == 0 or m == 0:
        raise InsufficientSamples("both samples must be non-empty", n=n, m=m)
    pts = np.concatenate([a, b])
    fa = np.searchsorted(a, pts, side="right") / n
    fb = np.searchsorted(b, pts, side="right") / m
    stat = float(np.max(np.abs(fa - fb)))
    crit = ks_critical(alpha) * math.sqrt((n + m) / (n * m))
    reject = stat > crit and min(n, m) >= KS_MIN_SAMPLES
    return KSResult(stat, crit, bool(reject), n, m, alpha)


def ks_normal(samples, mu: float = 0.0, sigma: float = 1.0, alpha: float = 0.01) -> KSResult:
    """One-sample test against N(mu, sigma^2)."""
    if not sigma > 0:
        raise InvalidParameter(f"sigma must be positive, got {sigma}")
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    n = x.size
    if n == 0:
        raise InsufficientSamples("empty sample", n=0)
    cdf = normal_cdf(x, mu, sigma)
    i = np.arange(1, n + 1)
    stat = float(max(np.max(i / n - cdf), np.max(cdf - (i - 1) / n)))
    crit = ks_critical(alpha) / math.sqrt(n)
    return KSResult(stat, crit, bool(stat > crit and n >= KS_MIN_SAMPLES), n, None, alpha)


def pooled_stderr(x, axis: int = 0) -> np.ndarray:
    """Standard error of the mean along ``axis`` (NaN with fewer than two entries)."""
    x = np.asarray(x, dtype=float)
    n = x.shape[axis]
    if n < 2:
        return np.full(np.delete(x.shape, axis), np.nan)
    return np.std(x, axis=axis, ddof=1) / math.sqrt(n)
