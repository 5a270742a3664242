"""Stopping-derivative estimators: drift, variance rate, covariance rate.

Every estimator follows the same recipe. Outer paths are simulated up to an
anchor S; each is branched into M continuations; a shrinking family of stops
T_j > S is realised on every continuation; and the difference quotient

    (F[T_j | F_S] - F[S | F_S]) / E[T_j - S | F_S]

is formed per outer path and scale. The pooled ratios are then extrapolated
to the zero-scale limit with one Richardson step.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .condest import BundleSample, MomentKind, Observable, sample_bundles
from .errors import DegenerateStoppingFamily, InvalidParameter
from .paths import TimeGrid, fmt_float
from .processes import Adaptation, ProcessSpec
from .stats import pooled_stderr
from .stopping import DEFAULT_CAP, AtTime, FirstExit, OffsetFromS, StoppingRule

DEFAULT_TOL_REL = 0.05
DEFAULT_TOL_ABS = 1e-3
DEFAULT_EPS = 0.1
# a scale whose stops collapse onto S this often is rejected
DEGENERATE_FRACTION = 0.01

VARIANTS = ("cond_var", "rel_second_moment", "projected_centre", "integrated_drift_centre")


@dataclass(frozen=True)
class ShrinkFamily:
    """Stops ``S + h_j`` (``offset``) or first exits of radius ``eps_j`` (``first_exit``),
    with scales ``initial * factor**j`` for j < levels."""

    kind: str = "offset"
    initial: float = 0.1
    factor: float = 0.5
    levels: int = 4
    cap: float = DEFAULT_CAP

    def __post_init__(self):
        if self.kind not in ("offset", "first_exit"):
            raise InvalidParameter(f"unknown family kind {self.kind!r}", field="family.kind")
        if not self.initial > 0:
            raise InvalidParameter("family initial scale must be positive", field="family.initial")
        if not 0 < self.factor < 1:
            raise InvalidParameter("family factor must lie in (0, 1)", field="family.factor")
        if int(self.levels) != self.levels or self.levels < 2:
            raise InvalidParameter("family needs at least 2 levels", field="family.levels")

    @property
    def scales(self) -> np.ndarray:
        return self.initial * self.factor ** np.arange(self.levels)

    def rules(self) -> list:
        if self.kind == "offset":
            return [OffsetFromS(h) for h in self.scales]
        return [FirstExit(e, self.cap) for e in self.scales]


def richardson(fine, coarse, factor: float = 0.5):
    """First-order extrapolation from scales ``h`` (fine) and ``h / factor`` (coarse)."""
    return (np.asarray(fine) - factor * np.asarray(coarse)) / (1.0 - factor)


@dataclass(eq=False)
class DerivEstimate:
    scales: np.ndarray
    ratios: np.ndarray            # (n_outer, J)
    pooled: np.ndarray            # (J,)
    stderr: np.ndarray            # (J,)
    extrapolated: float
    extrapolated_stderr: float
    per_path_extrapolated: np.ndarray
    converged: bool
    frac_within_eps: np.ndarray
    eps: float = DEFAULT_EPS
    tol_rel: float = DEFAULT_TOL_REL
    tol_abs: float = DEFAULT_TOL_ABS
    label: str = ""
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_ratios(cls, scales, ratios, factor: float = 0.5, *, inner_stderr=None,
                    eps: float = DEFAULT_EPS, tol_rel: float = DEFAULT_TOL_REL,
                    tol_abs: float = DEFAULT_TOL_ABS, label: str = "") -> "DerivEstimate":
        ratios = np.atleast_2d(np.asarray(ratios, dtype=float))
        pooled = ratios.mean(axis=0)
        se = pooled_stderr(ratios, axis=0)
        per_ext = richardson(ratios[:, -1], ratios[:, -2], factor)
        ext = float(per_ext.mean())
        ext_se = float(pooled_stderr(per_ext)) if ratios.shape[0] > 1 else math.nan
        if ratios.shape[0] == 1 and inner_stderr is not None:
            inner = np.atleast_2d(np.asarray(inner_stderr, dtype=float))
            se = inner[0]
            # conservative: the two scales share continuations, ignore the correlation
            ext_se = float(math.hypot(se[-1] / (1 - factor), factor * se[-2] / (1 - factor)))
        converged = bool(abs(pooled[-1] - pooled[-2]) <= tol_rel * (abs(pooled[-1]) + tol_abs))
        frac = np.mean(np.abs(ratios - ext) <= eps, axis=0)
        return cls(np.asarray(scales, dtype=float), ratios, pooled, se, ext, ext_se, per_ext,
                   converged, frac, eps, tol_rel, tol_abs, label)

    @property
    def value(self) -> float:
        return self.extrapolated

    @property
    def finest(self) -> float:
        return float(self.pooled[-1])

    @property
    def finest_stderr(self) -> float:
        return float(self.stderr[-1])

    def ci(self, z: float = 1.96):
        return (self.extrapolated - z * self.extrapolated_stderr,
                self.extrapolated + z * self.extrapolated_stderr)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["scale_index", "scale", "ratio", "stderr", "frac_within_eps",
                        "converged"])
            for j in range(len(self.scales)):
                w.writerow([j, fmt_float(self.scales[j]), fmt_float(self.pooled[j]),
                            fmt_float(self.stderr[j]), fmt_float(self.frac_within_eps[j]),
                            int(self.converged)])

    def summary(self, z: float = 1.96) -> dict:
        lo, hi = self.ci(z)
        return {"label": self.label, "extrapolated": self.extrapolated,
                "stderr": self.extrapolated_stderr, "ci": [lo, hi],
                "finest": self.finest, "finest_stderr": self.finest_stderr,
                "converged": self.converged, "n_outer": int(self.ratios.shape[0]),
                "scales": self.scales.tolist(), "pooled": self.pooled.tolist(), **self.meta}

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(_clean(self.summary()), fh, indent=2, sort_keys=True)


def _clean(obj):
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, (np.floating, np.integer)):
        return _clean(obj.item())
    return obj


# ---------------------------------------------------------------------------
# ratios from a bundle sample
# ---------------------------------------------------------------------------

def check_degenerate(sample: BundleSample) -> None:
    frac = sample.degenerate_fraction()
    if np.any(frac >= DEGENERATE_FRACTION):
        j = int(np.argmax(frac >= DEGENERATE_FRACTION))
        raise DegenerateStoppingFamily(
            f"{frac[j]:.1%} of stops collapse onto S at scale index {j}", scale_index=j)


def drift_ratios(sample: BundleSample, coord: int = 0) -> np.ndarray:
    """(E[X_{T-} | F_S] - X_S) / E[T - S | F_S], shape (N, J)."""
    est = sample.moment(MomentKind.cond_exp(coord))
    return (est.value - sample.obs_s[:, coord][:, None]) / est.denominator


def moment_ratios(sample: BundleSample, kind: MomentKind) -> np.ndarray:
    """Moment divided by E[T - S | F_S]; the moment vanishes at T = S for these kinds."""
    est = sample.moment(kind)
    return est.value / est.denominator


def variance_kind(variant: str, coord: int = 0, centre=None,
                  integrand: Optional[Adaptation] = None) -> MomentKind:
    if variant not in VARIANTS:
        raise InvalidParameter(f"unknown variance-rate variant {variant!r}")
    if variant == "projected_centre":
        return MomentKind.projected_centre(centre, coord)
    if variant == "integrated_drift_centre":
        return MomentKind.integrated_drift_centre(integrand, coord)
    return MomentKind(variant, coord)


def symmetric_cov_ratios(sample: BundleSample, i: int, j: int) -> np.ndarray:
    """Covariance-rate ratios averaged over the (i, j) and (j, i) products."""
    a = moment_ratios(sample, MomentKind.cond_cov(i, j))
    if i == j:
        return a
    b = moment_ratios(sample, MomentKind.cond_cov(j, i))
    return 0.5 * (a + b)


# ---------------------------------------------------------------------------
# public estimators
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Sizes:
    n_outer: int = 200
    M: int = 1000


def _sample(spec, grid, anchor, family, n_outer, M, seed, threads, observables=None,
            driver=0, integrand=None):
    sample = sample_bundles(spec, grid, anchor, family.rules(), n_outer, M, seed,
                            observables=observables, driver=driver, integrand=integrand,
                            threads=threads)
    check_degenerate(sample)
    return sample


def drift_at(spec: ProcessSpec, anchor: StoppingRule, family: ShrinkFamily, n_outer: int,
             M: int, seed: int, grid: TimeGrid, *, coord: int = 0, threads: int = 1,
             eps: float = DEFAULT_EPS) -> DerivEstimate:
    sample = _sample(spec, grid, anchor, family, n_outer, M, seed, threads, driver=coord)
    return DerivEstimate.from_ratios(family.scales, drift_ratios(sample, coord), family.factor,
                                     eps=eps, label="drift")


def variance_rate_at(spec: ProcessSpec, anchor: StoppingRule, family: ShrinkFamily,
                     n_outer: int, M: int, seed: int, grid: TimeGrid, *,
                     variant: str = "cond_var", centre=None,
                     integrand: Optional[Adaptation] = None, coord: int = 0,
                     threads: int = 1, eps: float = DEFAULT_EPS) -> DerivEstimate:
    """Variance rate through one of the equivalent centring variants.

    ``projected_centre`` uses ``centre`` as B_S (None: the drift estimated from
    the same bundle); ``integrated_drift_centre`` needs the drift ``integrand``.
    """
    kind = variance_kind(variant, coord, centre, integrand)
    sample = _sample(spec, grid, anchor, family, n_outer, M, seed, threads, driver=coord,
                     integrand=integrand if variant == "integrated_drift_centre" else None)
    return DerivEstimate.from_ratios(family.scales, moment_ratios(sample, kind), family.factor,
                                     eps=eps, label=f"variance_rate[{variant}]")


def covariance_rate_at(spec: ProcessSpec, anchor: StoppingRule, family: ShrinkFamily,
                       n_outer: int, M: int, seed: int, grid: TimeGrid, *,
                       coords=(0, 1), driver: int = 0, threads: int = 1,
                       eps: float = DEFAULT_EPS) -> DerivEstimate:
    i, j = coords
    if max(i, j) >= spec.dim:
        raise InvalidParameter(f"coordinates {coords} exceed the dimension {spec.dim}")
    sample = _sample(spec, grid, anchor, family, n_outer, M, seed, threads, driver=driver)
    ratios = moment_ratios(sample, MomentKind.cond_cov(i, j))
    return DerivEstimate.from_ratios(family.scales, ratios, family.factor, eps=eps,
                                     label=f"covariance_rate[{i},{j}]")


@dataclass(eq=False)
class CovarianceRateMatrix:
    entries: list  # d x d nested list of DerivEstimate

    @property
    def extrapolated(self) -> np.ndarray:
        return np.array([[e.extrapolated for e in row] for row in self.entries])

    @property
    def finest(self) -> np.ndarray:
        return np.array([[e.finest for e in row] for row in self.entries])

    @property
    def stderr(self) -> np.ndarray:
        return np.array([[e.extrapolated_stderr for e in row] for row in self.entries])

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.extrapolated).min())


def covariance_matrix_from_sample(sample: BundleSample, factor: float, scales,
                                  d: Optional[int] = None, eps: float = DEFAULT_EPS):
    d = sample.obs_s.shape[1] if d is None else d
    entries = [[None] * d for _ in range(d)]
    for i in range(d):
        for j in range(i, d):
            est = DerivEstimate.from_ratios(scales, symmetric_cov_ratios(sample, i, j), factor,
                                            eps=eps, label=f"covariance_rate[{i},{j}]")
            entries[i][j] = entries[j][i] = est
    return CovarianceRateMatrix(entries)


def covariance_matrix_at(spec: ProcessSpec, anchor: StoppingRule, family: ShrinkFamily,
                         n_outer: int, M: int, seed: int, grid: TimeGrid, *, driver: int = 0,
                         threads: int = 1, eps: float = DEFAULT_EPS) -> CovarianceRateMatrix:
    sample = _sample(spec, grid, anchor, family, n_outer, M, seed, threads, driver=driver)
    return covariance_matrix_from_sample(sample, family.factor, family.scales, spec.dim, eps)


def characteristic_at(spec: ProcessSpec, f: Callable, family: ShrinkFamily, n_outer: int,
                      M: int, seed: int, grid: TimeGrid, *, threads: int = 1,
                      eps: float = DEFAULT_EPS) -> DerivEstimate:
    """``(E f(X_T) - f(x)) / E T`` over first exits of a process started at x (value at T, not T-)."""
    if family.kind != "first_exit":
        raise InvalidParameter("the characteristic operator uses a first-exit family")
    sample = _sample(spec, grid, AtTime(0.0), family, n_outer, M, seed, threads)
    fx = np.asarray(f(sample.obs_s[:, 0]), dtype=float)[:, None]
    num = np.asarray(f(sample.obs_t[..., 0]), dtype=float).mean(axis=-1) - fx
    ratios = num / sample.denominator
    return DerivEstimate.from_ratios(family.scales, ratios, family.factor, eps=eps,
                                     label="characteristic")


def convergence_probability_check(ratios, target: float, eps: float, delta: float):
    """True when at least a 1 - delta fraction of per-path ratios lie within eps of target."""
    r = np.asarray(ratios, dtype=float).ravel()
    frac = float(np.mean(np.abs(r - target) <= eps)) if r.size else 0.0
    return frac >= 1.0 - delta, frac


def estimate_from_sample(sample: BundleSample, what: str, family: ShrinkFamily, *,
                         coord: int = 0, other: int = 1, variant: str = "cond_var",
                         centre=None, eps: float = DEFAULT_EPS) -> DerivEstimate:
    """Drift / variance / covariance estimate on an existing sample (shared continuations)."""
    if what == "drift":
        ratios = drift_ratios(sample, coord)
    elif what == "variance":
        kind = variance_kind(variant, coord, centre, _Marker() if
                             variant == "integrated_drift_centre" else None)
        ratios = moment_ratios(sample, kind)
    elif what == "covariance":
        ratios = symmetric_cov_ratios(sample, coord, other)
    else:
        raise InvalidParameter(f"unknown estimate {what!r}")
    return DerivEstimate.from_ratios(family.scales, ratios, family.factor, eps=eps,
                                     label=f"{what}[{coord}]")


class _Marker(Adaptation):
    """Placeholder integrand: the integral already lives in the sample."""

    def __call__(self, prefix, t):
        raise NotImplementedError
